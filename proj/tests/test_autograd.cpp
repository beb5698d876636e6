#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "metaprompt/gradcheck.hpp"
#include "metaprompt/ops.hpp"
#include "metaprompt/rng.hpp"
#include "metaprompt/tape.hpp"

using namespace metaprompt;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, double lo = -1.0,
                     double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
  for (double& x : v) x = lo + (hi - lo) * rng.next_double();
  return Tensor::constant(shape, std::move(v));
}

// Reduces an arbitrary op output to a scalar with fixed random weights, so
// gradients of every output element are exercised.
Tensor weighted_total(const Tensor& out, const Tensor& weights) {
  return ops::sum(ops::mul(out, weights));
}

}  // namespace

TEST_CASE("forward values of basic primitives") {
  SECTION("matmul of a row and a column") {
    Tensor a = Tensor::constant({1, 2}, {1.0, 2.0});
    Tensor b = Tensor::constant({2, 1}, {1.0, 1.0});
    Tensor c = ops::matmul(a, b);
    REQUIRE(c.shape() == Shape{1, 1});
    REQUIRE(c.values()[0] == 3.0);
  }

  SECTION("adding zero changes nothing") {
    Rng rng(3);
    Tensor x = random_tensor(rng, {4, 3});
    Tensor y = ops::add(x, Tensor::zeros({4, 3}));
    REQUIRE(y.values() == x.values());
  }

  SECTION("cross entropy of uniform logits is log of vocab size") {
    Tensor logits = Tensor::zeros({3, 8});
    for (int label : {0, 3, 7}) {
      Tensor loss = ops::softmax_cross_entropy(logits, {label, label, label},
                                               {1.0, 1.0, 1.0});
      REQUIRE_THAT(loss.scalar_value(),
                   Catch::Matchers::WithinAbs(std::log(8.0), 1e-12));
    }
  }

  SECTION("masked rows do not contribute") {
    Rng rng(11);
    Tensor logits = random_tensor(rng, {4, 6});
    Tensor l1 = ops::softmax_cross_entropy(logits, {1, 2, 3, 4},
                                           {1.0, 0.0, 1.0, 0.0});
    // Same logits with garbage labels in the masked rows.
    Tensor l2 = ops::softmax_cross_entropy(logits, {1, 5, 3, 0},
                                           {1.0, 0.0, 1.0, 0.0});
    REQUIRE(l1.scalar_value() == l2.scalar_value());
  }
}

TEST_CASE("simple analytic gradients") {
  SECTION("d/dx x^2 at 3 is 6") {
    Tape tape;
    Tensor x = tape.leaf({1}, {3.0});
    Tensor y = ops::mul(x, x);
    auto g = tape.grad(y, {x}, false);
    REQUIRE_THAT(g[0].scalar_value(), Catch::Matchers::WithinAbs(6.0, 1e-12));
  }

  SECTION("d2/dx2 x^3 at 2 is 12 via grad of grad") {
    Tape tape(true);
    Tensor x = tape.leaf({1}, {2.0});
    Tensor y = ops::mul(ops::mul(x, x), x);
    auto g = tape.grad(y, {x}, true);
    auto h = tape.grad(g[0], {x}, false);
    REQUIRE_THAT(h[0].scalar_value(), Catch::Matchers::WithinAbs(12.0, 1e-10));
  }
}

TEST_CASE("finite difference oracle sanity") {
  SECTION("x^2 at 3") {
    auto f = [](const Tensor& t) { return t.values()[0] * t.values()[0]; };
    Tensor g = finite_diff_grad(f, Tensor::scalar(3.0), 1e-5);
    REQUIRE_THAT(g.scalar_value(), Catch::Matchers::WithinAbs(6.0, 1e-8));
  }

  SECTION("constant function has zero gradient") {
    auto f = [](const Tensor&) { return 4.25; };
    Tensor g = finite_diff_grad(f, Tensor::constant({3}, {1.0, -2.0, 0.5}), 1e-5);
    for (double v : g.values()) REQUIRE(v == 0.0);
  }

  SECTION("oracle matches the hand derivative of a tanh composite") {
    // f(x) = sum(tanh(2x)); df/dx_i = 2 (1 - tanh(2 x_i)^2)
    auto f = [](const Tensor& t) {
      double s = 0.0;
      for (double v : t.values()) s += std::tanh(2.0 * v);
      return s;
    };
    Tensor x = Tensor::constant({4}, {-0.7, 0.1, 0.4, 1.3});
    Tensor g = finite_diff_grad(f, x, 1e-6);
    for (std::size_t i = 0; i < 4; ++i) {
      const double th = std::tanh(2.0 * x.values()[i]);
      REQUIRE_THAT(g.values()[i],
                   Catch::Matchers::WithinAbs(2.0 * (1.0 - th * th), 1e-7));
    }
  }

  SECTION("rejects non-positive epsilon") {
    auto f = [](const Tensor&) { return 0.0; };
    REQUIRE_THROWS_AS(finite_diff_grad(f, Tensor::scalar(1.0), 0.0),
                      std::invalid_argument);
  }
}

namespace {

// One gradient-check scenario: a graph builder applied to N leaf inputs.
struct OpScenario {
  const char* name;
  std::vector<Shape> input_shapes;
  std::function<Tensor(const std::vector<Tensor>&)> build;
  double lo = -1.0, hi = 1.0;
};

std::vector<OpScenario> primitive_scenarios() {
  std::vector<OpScenario> cases;
  cases.push_back({"add", {{3, 4}, {3, 4}},
                   [](const std::vector<Tensor>& in) { return ops::add(in[0], in[1]); }});
  cases.push_back({"mul", {{3, 4}, {3, 4}},
                   [](const std::vector<Tensor>& in) { return ops::mul(in[0], in[1]); }});
  cases.push_back({"scale", {{2, 5}},
                   [](const std::vector<Tensor>& in) { return ops::scale(in[0], -1.7); }});
  cases.push_back({"matmul", {{3, 4}, {4, 2}},
                   [](const std::vector<Tensor>& in) { return ops::matmul(in[0], in[1]); }});
  cases.push_back({"transpose", {{3, 4}},
                   [](const std::vector<Tensor>& in) { return ops::transpose(in[0]); }});
  cases.push_back({"reshape", {{3, 4}},
                   [](const std::vector<Tensor>& in) { return ops::reshape(in[0], {2, 6}); }});
  cases.push_back({"slice_rows", {{5, 3}},
                   [](const std::vector<Tensor>& in) { return ops::slice_rows(in[0], 1, 4); }});
  cases.push_back({"pad_rows", {{2, 3}},
                   [](const std::vector<Tensor>& in) { return ops::pad_rows(in[0], 2, 6); }});
  cases.push_back({"concat_rows", {{2, 3}, {3, 3}},
                   [](const std::vector<Tensor>& in) {
                     return ops::concat_rows({in[0], in[1]});
                   }});
  cases.push_back({"sum", {{4, 2}},
                   [](const std::vector<Tensor>& in) { return ops::sum(in[0]); }});
  cases.push_back({"mean", {{4, 2}},
                   [](const std::vector<Tensor>& in) { return ops::mean(in[0]); }});
  cases.push_back({"row_sum", {{4, 3}},
                   [](const std::vector<Tensor>& in) { return ops::row_sum(in[0]); }});
  cases.push_back({"broadcast_cols", {{4, 1}},
                   [](const std::vector<Tensor>& in) {
                     return ops::broadcast_cols(in[0], 5);
                   }});
  cases.push_back({"broadcast_scalar", {{1}},
                   [](const std::vector<Tensor>& in) {
                     return ops::broadcast_scalar(in[0], {3, 3});
                   }});
  cases.push_back({"softmax_rows", {{3, 5}},
                   [](const std::vector<Tensor>& in) { return ops::softmax_rows(in[0]); }});
  cases.push_back({"softmax_cross_entropy", {{3, 5}},
                   [](const std::vector<Tensor>& in) {
                     return ops::softmax_cross_entropy(in[0], {0, 2, 4},
                                                       {1.0, 0.0, 1.0});
                   }});
  // Keep relu inputs away from the kink where the derivative is undefined.
  cases.push_back({"relu_pos", {{3, 4}},
                   [](const std::vector<Tensor>& in) { return ops::relu(in[0]); },
                   0.2, 1.0});
  cases.push_back({"relu_neg", {{3, 4}},
                   [](const std::vector<Tensor>& in) { return ops::relu(in[0]); },
                   -1.0, -0.2});
  cases.push_back({"tanh", {{3, 4}},
                   [](const std::vector<Tensor>& in) { return ops::tanh(in[0]); }});
  cases.push_back({"gather_rows", {{5, 3}},
                   [](const std::vector<Tensor>& in) {
                     return ops::gather_rows(in[0], {4, 0, 0, 2});
                   }});
  cases.push_back({"scatter_rows", {{3, 2}},
                   [](const std::vector<Tensor>& in) {
                     return ops::scatter_rows(in[0], {1, 4, 1}, 5);
                   }});
  return cases;
}

}  // namespace

TEST_CASE("every primitive matches the finite-difference oracle") {
  Rng rng(1234);
  for (const OpScenario& sc : primitive_scenarios()) {
    DYNAMIC_SECTION(sc.name) {
      for (int trial = 0; trial < 3; ++trial) {
        std::vector<Tensor> inputs;
        for (const Shape& s : sc.input_shapes) {
          inputs.push_back(random_tensor(rng, s, sc.lo, sc.hi));
        }
        Tensor out_probe = sc.build(inputs);
        Tensor weights = random_tensor(rng, out_probe.shape());

        for (std::size_t wrt = 0; wrt < inputs.size(); ++wrt) {
          Tape tape;
          std::vector<Tensor> leaves;
          for (std::size_t i = 0; i < inputs.size(); ++i) {
            leaves.push_back(tape.leaf(inputs[i], i == wrt));
          }
          Tensor loss = weighted_total(sc.build(leaves), weights);
          auto grad = tape.grad(loss, {leaves[wrt]}, false);

          auto f = [&](const Tensor& x) {
            std::vector<Tensor> probe = inputs;
            probe[wrt] = x;
            return weighted_total(sc.build(probe), weights).scalar_value();
          };
          Tensor fd = finite_diff_grad(f, inputs[wrt], 1e-5);
          const double err = max_relative_error(grad[0].values(), fd.values());
          INFO(sc.name << " input " << wrt << " trial " << trial);
          REQUIRE(err < 1e-5);
        }
      }
    }
  }
}

TEST_CASE("second-order gradients match finite differences of the first") {
  // g(x) = d/dx [ sum(tanh(x W)^2 w) ]; compare d(g.w2)/dx against the oracle
  // applied to the first gradient.
  Rng rng(77);
  Tensor x0 = random_tensor(rng, {1, 6});
  Tensor w = random_tensor(rng, {6, 4});
  Tensor mix = random_tensor(rng, {1, 4});
  Tensor probe = random_tensor(rng, {1, 6});

  auto first_grad = [&](const Tensor& xv) {
    Tape tape;
    Tensor x = tape.leaf(xv);
    Tensor h = ops::tanh(ops::matmul(x, w));
    Tensor loss = ops::sum(ops::mul(ops::mul(h, h), mix));
    return tape.grad(loss, {x}, false)[0];
  };

  // probe-weighted scalar of the gradient, differentiated once more.
  Tape tape(true);
  Tensor x = tape.leaf(x0);
  Tensor h = ops::tanh(ops::matmul(x, w));
  Tensor loss = ops::sum(ops::mul(ops::mul(h, h), mix));
  Tensor g = tape.grad(loss, {x}, true)[0];
  Tensor gscalar = ops::sum(ops::mul(g, probe));
  Tensor hvp = tape.grad(gscalar, {x}, false)[0];

  auto f = [&](const Tensor& xv) {
    return ops::sum(ops::mul(first_grad(xv), probe)).scalar_value();
  };
  Tensor fd = finite_diff_grad(f, x0, 1e-5);
  REQUIRE(max_relative_error(hvp.values(), fd.values()) < 1e-4);
}

TEST_CASE("two-layer network gradient matches the oracle closely") {
  Rng rng(42);
  Tensor w1 = random_tensor(rng, {5, 8});
  Tensor w2 = random_tensor(rng, {8, 4});
  Tensor input = random_tensor(rng, {3, 5});
  const std::vector<int> labels = {1, 0, 3};
  const std::vector<double> mask = {1.0, 1.0, 1.0};

  auto network_loss = [&](const Tensor& x) {
    Tensor h = ops::tanh(ops::matmul(x, w1));
    Tensor logits = ops::matmul(h, w2);
    return ops::softmax_cross_entropy(logits, labels, mask);
  };

  Tape tape;
  Tensor x = tape.leaf(input);
  auto grad = tape.grad(network_loss(x), {x}, false);

  auto f = [&](const Tensor& xv) { return network_loss(xv).scalar_value(); };
  Tensor fd = finite_diff_grad(f, input, 1e-5);
  REQUIRE(max_relative_error(grad[0].values(), fd.values()) < 1e-6);
}

TEST_CASE("differentiation is linear over summed losses") {
  Rng rng(9);
  Tensor xv = random_tensor(rng, {2, 3});
  Tensor a = random_tensor(rng, {3, 3});
  Tensor b = random_tensor(rng, {3, 2});

  Tape tape;
  Tensor x = tape.leaf(xv);
  Tensor la = ops::sum(ops::tanh(ops::matmul(x, a)));
  Tensor lb = ops::sum(ops::mul(ops::matmul(x, b), ops::matmul(x, b)));
  auto ga = tape.grad(la, {x}, false)[0];
  auto gb = tape.grad(lb, {x}, false)[0];
  auto gsum = tape.grad(ops::add(la, lb), {x}, false)[0];
  for (std::size_t i = 0; i < gsum.values().size(); ++i) {
    REQUIRE_THAT(gsum.values()[i],
                 Catch::Matchers::WithinAbs(ga.values()[i] + gb.values()[i], 1e-12));
  }
}

TEST_CASE("tape bookkeeping") {
  SECTION("replay reproduces forward values bit for bit") {
    Rng rng(5);
    Tape tape;
    Tensor x = tape.leaf(random_tensor(rng, {4, 4}));
    Tensor y = ops::softmax_rows(ops::matmul(x, ops::transpose(x)));
    Tensor loss = ops::mean(y);
    tape.grad(loss, {x}, false);
    REQUIRE(tape.replay_matches());
  }

  SECTION("same seed rebuilds identical values") {
    auto run = [](std::uint64_t seed) {
      Rng rng(seed);
      Tape tape;
      Tensor x = tape.leaf(random_tensor(rng, {3, 3}));
      Tensor y = ops::tanh(ops::matmul(x, random_tensor(rng, {3, 3})));
      return ops::sum(y).scalar_value();
    };
    REQUIRE(run(123) == run(123));
  }

  SECTION("plain grad does not grow the tape") {
    Tape tape;
    Tensor x = tape.leaf({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor loss = ops::sum(ops::mul(x, x));
    const std::size_t before = tape.size();
    tape.grad(loss, {x}, false);
    REQUIRE(tape.size() == before);
    tape.grad(loss, {x}, true);
    REQUIRE(tape.size() > before);
  }

  SECTION("create_graph requires a retaining tape") {
    Tape tape(false);
    Tensor x = tape.leaf({1}, {2.0});
    Tensor loss = ops::mul(x, x);
    REQUIRE_THROWS_AS(tape.grad(loss, {x}, true), std::invalid_argument);
    REQUIRE_NOTHROW(tape.grad(loss, {x}, false));
  }
}

TEST_CASE("error paths") {
  SECTION("non-scalar loss is rejected") {
    Tape tape;
    Tensor x = tape.leaf({2}, {1.0, 2.0});
    REQUIRE_THROWS_AS(tape.grad(x, {x}, false), std::invalid_argument);
  }

  SECTION("detached wrt tensor is rejected") {
    Tape tape;
    Tensor x = tape.leaf({1}, {1.0});
    Tensor detached = Tensor::scalar(1.0);
    Tensor loss = ops::mul(x, x);
    REQUIRE_THROWS_AS(tape.grad(loss, {detached}, false), std::invalid_argument);
  }

  SECTION("shape mismatches are rejected with the op name") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 3});
    REQUIRE_THROWS_WITH(ops::add(a, b), Catch::Matchers::ContainsSubstring("add"));
    REQUIRE_THROWS_AS(ops::matmul(a, a), std::invalid_argument);
  }

  SECTION("non-finite leaves are rejected at the boundary") {
    Tape tape;
    REQUIRE_THROWS_AS(tape.leaf({1}, {std::nan("")}, true), NonFiniteError);
  }

  SECTION("empty supervision mask is rejected") {
    Tensor logits = Tensor::zeros({2, 4});
    REQUIRE_THROWS_AS(ops::softmax_cross_entropy(logits, {0, 1}, {0.0, 0.0}),
                      std::invalid_argument);
  }

  SECTION("inputs from different tapes are rejected") {
    Tape t1, t2;
    Tensor a = t1.leaf({1}, {1.0});
    Tensor b = t2.leaf({1}, {2.0});
    REQUIRE_THROWS_AS(ops::add(a, b), std::invalid_argument);
  }
}

TEST_CASE("gradients flow only where requested") {
  // Frozen leaves are skipped entirely; their adjoint is reported as zero.
  Tape tape;
  Tensor x = tape.leaf({1, 3}, {0.3, -0.2, 0.9}, true);
  Tensor frozen = tape.leaf({3, 3}, std::vector<double>(9, 0.5), false);
  Tensor loss = ops::sum(ops::matmul(x, frozen));
  auto g = tape.grad(loss, {x}, false);
  REQUIRE(g[0].size() == 3);
  for (double v : g[0].values()) REQUIRE(v == 1.5);
}
