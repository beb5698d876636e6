#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "metaprompt/backbone.hpp"
#include "metaprompt/gradcheck.hpp"
#include "metaprompt/rng.hpp"

using namespace metaprompt;

namespace {

const std::vector<std::pair<std::string, std::string>> kProbePairs = {
    {"w0 w5 w9 w12", "w3"},
    {"w7 w2 w44 w31", "w10"},
    {"w20 w21 w22 w23", "w40"},
    {"w55 w54 w3 w2", "w7"}};

Tensor random_prompt(int len, int dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(len) * dim);
  for (double& x : v) x = 0.5 * rng.next_normal();
  return Tensor::constant({len, dim}, std::move(v));
}

}  // namespace

TEST_CASE("initialization is deterministic in the seed") {
  FrozenBackbone a = init_backbone(16, 1, 32, 5);
  FrozenBackbone b = init_backbone(16, 1, 32, 5);
  FrozenBackbone c = init_backbone(16, 1, 32, 6);
  REQUIRE(a.checksum() == b.checksum());
  REQUIRE(a.checksum() != c.checksum());
}

TEST_CASE("fresh model starts near the uniform loss") {
  FrozenBackbone b = init_backbone(32, 2, 64, 7);
  TokenBatch tb = make_token_batch(b.vocab, kProbePairs);
  const double loss = nll_loss_value(b, nullptr, tb);
  const double lnv = std::log(64.0);
  REQUIRE(loss > lnv * 0.85);
  REQUIRE(loss < lnv * 1.15);
  // Regression pin for this exact configuration and batch.
  REQUIRE_THAT(loss, Catch::Matchers::WithinAbs(4.1310629869377484, 1e-12));
}

TEST_CASE("zeroed head produces exactly the uniform loss") {
  FrozenBackbone b = init_backbone(16, 1, 32, 3);
  b.head = Tensor::zeros({16, 32});
  TokenBatch tb = make_token_batch(b.vocab, {{"w1 w2", "w3"}, {"w4 w5", "w6"}});
  const double loss = nll_loss_value(b, nullptr, tb);
  REQUIRE_THAT(loss, Catch::Matchers::WithinAbs(std::log(32.0), 1e-12));
}

TEST_CASE("zero-length prompt equals the promptless model") {
  FrozenBackbone b = init_backbone(16, 1, 32, 3);
  TokenBatch tb = make_token_batch(b.vocab, {{"w1 w2 w3", "w4"}});
  Tensor empty_prompt = Tensor::constant({0, 16}, {});
  REQUIRE(nll_loss_value(b, &empty_prompt, tb) == nll_loss_value(b, nullptr, tb));
}

TEST_CASE("prompt gradient matches finite differences") {
  FrozenBackbone b = init_backbone(16, 2, 24, 11);
  TokenBatch tb = make_token_batch(b.vocab, {{"w1 w2 w3", "w4"}, {"w5 w6 w7", "w2"}});
  Tensor prompt0 = random_prompt(4, 16, 21);

  Tape tape;
  BoundBackbone bb = bind_backbone(tape, b, false);
  Tensor phi = tape.leaf(prompt0, true);
  Tensor loss = nll_loss_graph(bb, &phi, tb);
  auto grad = tape.grad(loss, {phi}, false);

  auto f = [&](const Tensor& p) { return nll_loss_value(b, &p, tb); };
  Tensor fd = finite_diff_grad(f, prompt0, 1e-5);
  REQUIRE(max_relative_error(grad[0].values(), fd.values()) < 1e-5);
}

TEST_CASE("fine-tuning mode reaches every parameter") {
  FrozenBackbone b = init_backbone(8, 1, 16, 2);
  TokenBatch tb = make_token_batch(b.vocab, {{"w1 w2", "w3"}});
  Tape tape;
  BoundBackbone bb = bind_backbone(tape, b, true);
  Tensor loss = nll_loss_graph(bb, nullptr, tb);
  auto grads = tape.grad(loss, bb.parameters(), false);
  // The head gradient is certainly nonzero; embeddings of used tokens too.
  double head_norm = 0.0;
  for (double v : grads.back().values()) head_norm += v * v;
  REQUIRE(head_norm > 0.0);
}

TEST_CASE("loss is invariant under batch row permutation") {
  FrozenBackbone b = init_backbone(16, 2, 32, 9);
  auto pairs = std::vector<std::pair<std::string, std::string>>{
      {"w1 w2 w3", "w4"}, {"w5 w6 w7", "w2"}, {"w9 w9 w1", "w3"}};
  auto shuffled = std::vector<std::pair<std::string, std::string>>{
      pairs[2], pairs[0], pairs[1]};
  const double l1 = nll_loss_value(b, nullptr, make_token_batch(b.vocab, pairs));
  const double l2 = nll_loss_value(b, nullptr, make_token_batch(b.vocab, shuffled));
  REQUIRE_THAT(l1, Catch::Matchers::WithinAbs(l2, 1e-12));
}

TEST_CASE("prompt extends the sequence by exactly its row count") {
  FrozenBackbone b = init_backbone(8, 1, 16, 2);
  TokenBatch tb = make_token_batch(b.vocab, {{"w1 w2", "w3"}, {"w4 w5", "w6"}});
  std::vector<int> fed = assemble_fed_ids(tb);
  const int fed_len = fed_length(tb);
  BoundBackbone bb = bind_detached(b);
  Tensor bare = transformer_states(bb, nullptr, fed, tb.batch, fed_len);
  Tensor prompt = random_prompt(5, 8, 1);
  Tensor prompted = transformer_states(bb, &prompt, fed, tb.batch, fed_len);
  REQUIRE(prompted.rows() / tb.batch - bare.rows() / tb.batch == 5);
}

TEST_CASE("greedy decode is deterministic and respects limits") {
  FrozenBackbone b = init_backbone(16, 1, 32, 4);
  std::vector<std::vector<int>> inputs = {b.vocab.encode("w1 w2 w3"),
                                          b.vocab.encode("w4 w5")};
  auto out1 = greedy_decode(b, nullptr, inputs, 4);
  auto out2 = greedy_decode(b, nullptr, inputs, 4);
  REQUIRE(out1 == out2);
  for (const auto& row : out1) REQUIRE(row.size() <= 4);

  FrozenBackbone tiny = init_backbone(8, 1, 16, 4);
  tiny.config.max_seq_len = 8;
  REQUIRE_THROWS_WITH(greedy_decode(tiny, nullptr, inputs, 16),
                      Catch::Matchers::ContainsSubstring("decode length overflow"));
}

TEST_CASE("export and import round-trip bit-exactly") {
  FrozenBackbone b = init_backbone(16, 2, 32, 13);
  const auto path = std::filesystem::temp_directory_path() / "mp_backbone_rt.json";
  save_backbone(b, path);
  FrozenBackbone loaded = load_backbone(path);
  REQUIRE(loaded.checksum() == b.checksum());
  REQUIRE(loaded.config.dim == b.config.dim);
  REQUIRE(loaded.vocab.tokens == b.vocab.tokens);
  REQUIRE(loaded.token_embeddings.values() == b.token_embeddings.values());
  TokenBatch tb = make_token_batch(b.vocab, {{"w1 w2", "w3"}});
  REQUIRE(nll_loss_value(loaded, nullptr, tb) == nll_loss_value(b, nullptr, tb));
  std::filesystem::remove(path);
}

TEST_CASE("tokenizer rejects tokens outside the vocabulary") {
  Vocab v = Vocab::make(16);
  REQUIRE_THROWS_WITH(v.encode("w1 mystery w2"),
                      Catch::Matchers::ContainsSubstring("mystery"));
}

TEST_CASE("loss construction validates inputs") {
  FrozenBackbone b = init_backbone(8, 1, 16, 2);
  SECTION("prompt width mismatch") {
    TokenBatch tb = make_token_batch(b.vocab, {{"w1", "w2"}});
    Tensor bad = Tensor::zeros({3, 12});
    BoundBackbone bb = bind_detached(b);
    REQUIRE_THROWS_AS(nll_loss_graph(bb, &bad, tb), std::invalid_argument);
  }
  SECTION("fully masked batch") {
    TokenBatch tb = make_token_batch(b.vocab, {{"w1", "w2"}});
    std::fill(tb.output_mask.begin(), tb.output_mask.end(), 0.0);
    BoundBackbone bb = bind_detached(b);
    REQUIRE_THROWS_AS(nll_loss_graph(bb, nullptr, tb), std::invalid_argument);
  }
  SECTION("token id outside the vocabulary") {
    TokenBatch tb = make_token_batch(b.vocab, {{"w1", "w2"}});
    tb.input_ids[0] = 99;
    BoundBackbone bb = bind_detached(b);
    REQUIRE_THROWS_AS(nll_loss_graph(bb, nullptr, tb), std::invalid_argument);
  }
}
