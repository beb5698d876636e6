#pragma once

// Reverse-mode automatic differentiation over an explicit per-episode tape.
//
// Every primitive keeps its backward rule expressed through the same
// primitive set, so when grad() is asked to build a differentiable gradient
// (create_graph) the backward pass records onto the tape and the result can
// be differentiated again. That closure property is what makes a gradient
// step itself differentiable.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metaprompt/common.hpp"
#include "metaprompt/tensor.hpp"

namespace metaprompt {

enum class OpKind : int {
  kLeaf = 0,
  kAdd,
  kMul,
  kScale,
  kMatmul,
  kTranspose,
  kReshape,
  kSliceRows,
  kPadRows,
  kConcatRows,
  kSumAll,
  kRowSum,
  kBroadcastCols,
  kBroadcastScalar,
  kSoftmaxRows,
  kSoftmaxXent,
  kRelu,
  kTanh,
  kGatherRows,
  kScatterRows,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kPadRows: return "pad_rows";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kSumAll: return "sum";
    case OpKind::kRowSum: return "row_sum";
    case OpKind::kBroadcastCols: return "broadcast_cols";
    case OpKind::kBroadcastScalar: return "broadcast_scalar";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kSoftmaxXent: return "softmax_cross_entropy";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kScatterRows: return "scatter_rows";
  }
  return "?";
}

// Per-op immediates: integer payload (labels, indices, dims) and real payload
// (scale factors, loss mask weights).
struct OpParams {
  std::vector<int> ints;
  std::vector<double> reals;
};

namespace detail {

struct View {
  const Shape* shape;
  const std::vector<double>* values;
  int rows() const { return (*shape)[0]; }
  int cols() const { return (*shape)[1]; }
  int rank() const { return static_cast<int>(shape->size()); }
  std::int64_t size() const { return shape_size(*shape); }
};

struct Payload {
  Shape shape;
  std::vector<double> values;
};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

[[noreturn]] inline void op_error(OpKind k, const std::string& what) {
  throw std::invalid_argument(std::string(op_name(k)) + ": " + what);
}

inline void require(bool cond, OpKind k, const char* what) {
  if (!cond) op_error(k, what);
}

inline void require_matrix(const View& v, OpKind k) {
  require(v.rank() == 2, k, "expects a 2-d tensor");
}

inline void require_same_shape(const View& a, const View& b, OpKind k) {
  if (*a.shape != *b.shape) {
    op_error(k, "shape mismatch " + shape_str(*a.shape) + " vs " +
                    shape_str(*b.shape));
  }
}

// Forward kernels. Shared by graph recording, off-tape evaluation, and tape
// replay.
inline Payload eval_op(OpKind kind, const OpParams& p,
                       const std::vector<View>& in) {
  switch (kind) {
    case OpKind::kLeaf:
      op_error(kind, "cannot evaluate a leaf");

    case OpKind::kAdd: {
      require(in.size() == 2, kind, "expects 2 inputs");
      require_same_shape(in[0], in[1], kind);
      Payload out{*in[0].shape, *in[0].values};
      const auto& b = *in[1].values;
      for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += b[i];
      return out;
    }

    case OpKind::kMul: {
      require(in.size() == 2, kind, "expects 2 inputs");
      require_same_shape(in[0], in[1], kind);
      Payload out{*in[0].shape, *in[0].values};
      const auto& b = *in[1].values;
      for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= b[i];
      return out;
    }

    case OpKind::kScale: {
      require(in.size() == 1 && p.reals.size() == 1, kind,
              "expects 1 input and a factor");
      Payload out{*in[0].shape, *in[0].values};
      for (double& v : out.values) v *= p.reals[0];
      return out;
    }

    case OpKind::kMatmul: {
      require(in.size() == 2, kind, "expects 2 inputs");
      require_matrix(in[0], kind);
      require_matrix(in[1], kind);
      const int m = in[0].rows(), k = in[0].cols();
      const int k2 = in[1].rows(), n = in[1].cols();
      if (k != k2) {
        op_error(kind, "inner dimensions differ: " + shape_str(*in[0].shape) +
                           " vs " + shape_str(*in[1].shape));
      }
      Payload out{{m, n}, std::vector<double>(static_cast<std::size_t>(m) * n)};
      MMap(out.values.data(), m, n).noalias() =
          CMap(in[0].values->data(), m, k) * CMap(in[1].values->data(), k, n);
      return out;
    }

    case OpKind::kTranspose: {
      require(in.size() == 1, kind, "expects 1 input");
      require_matrix(in[0], kind);
      const int m = in[0].rows(), n = in[0].cols();
      Payload out{{n, m}, std::vector<double>(static_cast<std::size_t>(m) * n)};
      MMap(out.values.data(), n, m) = CMap(in[0].values->data(), m, n).transpose();
      return out;
    }

    case OpKind::kReshape: {
      require(in.size() == 1, kind, "expects 1 input");
      Shape target(p.ints.begin(), p.ints.end());
      if (shape_size(target) != in[0].size()) {
        op_error(kind, "cannot reshape " + shape_str(*in[0].shape) + " to " +
                           shape_str(target));
      }
      return Payload{std::move(target), *in[0].values};
    }

    case OpKind::kSliceRows: {
      require(in.size() == 1 && p.ints.size() == 2, kind,
              "expects 1 input and [begin,end)");
      require_matrix(in[0], kind);
      const int r0 = p.ints[0], r1 = p.ints[1];
      require(0 <= r0 && r0 <= r1 && r1 <= in[0].rows(), kind,
              "row range out of bounds");
      const int n = in[0].cols();
      Payload out{{r1 - r0, n},
                  std::vector<double>(in[0].values->begin() +
                                          static_cast<std::ptrdiff_t>(r0) * n,
                                      in[0].values->begin() +
                                          static_cast<std::ptrdiff_t>(r1) * n)};
      return out;
    }

    case OpKind::kPadRows: {
      require(in.size() == 1 && p.ints.size() == 2, kind,
              "expects 1 input and [offset,total]");
      require_matrix(in[0], kind);
      const int off = p.ints[0], total = p.ints[1];
      require(off >= 0 && off + in[0].rows() <= total, kind,
              "pad target too small");
      const int n = in[0].cols();
      Payload out{{total, n},
                  std::vector<double>(static_cast<std::size_t>(total) * n, 0.0)};
      std::copy(in[0].values->begin(), in[0].values->end(),
                out.values.begin() + static_cast<std::ptrdiff_t>(off) * n);
      return out;
    }

    case OpKind::kConcatRows: {
      require(!in.empty(), kind, "expects at least 1 input");
      const int n = in[0].cols();
      int rows = 0;
      for (const auto& v : in) {
        require_matrix(v, kind);
        require(v.cols() == n, kind, "column counts differ");
        rows += v.rows();
      }
      Payload out{{rows, n}, {}};
      out.values.reserve(static_cast<std::size_t>(rows) * n);
      for (const auto& v : in) {
        out.values.insert(out.values.end(), v.values->begin(), v.values->end());
      }
      return out;
    }

    case OpKind::kSumAll: {
      require(in.size() == 1, kind, "expects 1 input");
      double s = 0.0;
      for (double v : *in[0].values) s += v;
      return Payload{{1}, {s}};
    }

    case OpKind::kRowSum: {
      require(in.size() == 1, kind, "expects 1 input");
      require_matrix(in[0], kind);
      const int m = in[0].rows(), n = in[0].cols();
      Payload out{{m, 1}, std::vector<double>(static_cast<std::size_t>(m))};
      const double* a = in[0].values->data();
      for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += a[static_cast<std::size_t>(i) * n + j];
        out.values[static_cast<std::size_t>(i)] = s;
      }
      return out;
    }

    case OpKind::kBroadcastCols: {
      require(in.size() == 1 && p.ints.size() == 1, kind,
              "expects 1 input and a column count");
      require_matrix(in[0], kind);
      require(in[0].cols() == 1, kind, "input must be a column vector");
      const int m = in[0].rows(), n = p.ints[0];
      Payload out{{m, n}, std::vector<double>(static_cast<std::size_t>(m) * n)};
      for (int i = 0; i < m; ++i) {
        const double v = (*in[0].values)[static_cast<std::size_t>(i)];
        std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>(i) * n, n, v);
      }
      return out;
    }

    case OpKind::kBroadcastScalar: {
      require(in.size() == 1 && in[0].size() == 1, kind,
              "expects a scalar input");
      Shape target(p.ints.begin(), p.ints.end());
      const auto n = static_cast<std::size_t>(shape_size(target));
      return Payload{std::move(target),
                     std::vector<double>(n, (*in[0].values)[0])};
    }

    case OpKind::kSoftmaxRows: {
      require(in.size() == 1, kind, "expects 1 input");
      require_matrix(in[0], kind);
      const int m = in[0].rows(), n = in[0].cols();
      require(n >= 1, kind, "empty rows");
      Payload out{*in[0].shape, std::vector<double>(static_cast<std::size_t>(m) * n)};
      const double* a = in[0].values->data();
      for (int i = 0; i < m; ++i) {
        const double* row = a + static_cast<std::size_t>(i) * n;
        double* orow = out.values.data() + static_cast<std::size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          orow[j] = std::exp(row[j] - mx);
          z += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= z;
      }
      return out;
    }

    case OpKind::kSoftmaxXent: {
      // ints = labels (one per row), reals = per-row weights; the loss is the
      // weighted mean of -log softmax(logits)[label].
      require(in.size() == 1, kind, "expects logits");
      require_matrix(in[0], kind);
      const int m = in[0].rows(), n = in[0].cols();
      require(static_cast<int>(p.ints.size()) == m, kind,
              "label count must equal row count");
      require(static_cast<int>(p.reals.size()) == m, kind,
              "weight count must equal row count");
      double wsum = 0.0;
      for (double w : p.reals) wsum += w;
      require(wsum > 0.0, kind, "no supervised positions (mask sums to zero)");
      const double* a = in[0].values->data();
      double total = 0.0;
      for (int i = 0; i < m; ++i) {
        const int label = p.ints[static_cast<std::size_t>(i)];
        require(0 <= label && label < n, kind, "label out of range");
        const double w = p.reals[static_cast<std::size_t>(i)];
        if (w == 0.0) continue;
        const double* row = a + static_cast<std::size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
        total += w * (mx + std::log(z) - row[label]);
      }
      return Payload{{1}, {total / wsum}};
    }

    case OpKind::kRelu: {
      require(in.size() == 1, kind, "expects 1 input");
      Payload out{*in[0].shape, *in[0].values};
      for (double& v : out.values) v = v > 0.0 ? v : 0.0;
      return out;
    }

    case OpKind::kTanh: {
      require(in.size() == 1, kind, "expects 1 input");
      Payload out{*in[0].shape, *in[0].values};
      for (double& v : out.values) v = std::tanh(v);
      return out;
    }

    case OpKind::kGatherRows: {
      require(in.size() == 1, kind, "expects 1 input");
      require_matrix(in[0], kind);
      const int m = in[0].rows(), n = in[0].cols();
      const int k = static_cast<int>(p.ints.size());
      Payload out{{k, n}, std::vector<double>(static_cast<std::size_t>(k) * n)};
      for (int i = 0; i < k; ++i) {
        const int r = p.ints[static_cast<std::size_t>(i)];
        require(0 <= r && r < m, kind, "row index out of range");
        std::copy_n(in[0].values->begin() + static_cast<std::ptrdiff_t>(r) * n, n,
                    out.values.begin() + static_cast<std::ptrdiff_t>(i) * n);
      }
      return out;
    }

    case OpKind::kScatterRows: {
      // ints = [target_rows, idx_0, ..., idx_{k-1}]; rows accumulate.
      require(in.size() == 1 && p.ints.size() >= 1, kind,
              "expects 1 input and target row count");
      require_matrix(in[0], kind);
      const int k = in[0].rows(), n = in[0].cols();
      const int total = p.ints[0];
      require(static_cast<int>(p.ints.size()) == k + 1, kind,
              "index count must equal row count");
      Payload out{{total, n},
                  std::vector<double>(static_cast<std::size_t>(total) * n, 0.0)};
      for (int i = 0; i < k; ++i) {
        const int r = p.ints[static_cast<std::size_t>(i) + 1];
        require(0 <= r && r < total, kind, "row index out of range");
        const double* src = in[0].values->data() + static_cast<std::size_t>(i) * n;
        double* dst = out.values.data() + static_cast<std::size_t>(r) * n;
        for (int j = 0; j < n; ++j) dst[j] += src[j];
      }
      return out;
    }
  }
  op_error(kind, "unknown op kind");
}

}  // namespace detail

struct Node {
  OpKind kind = OpKind::kLeaf;
  Shape shape;
  std::shared_ptr<const std::vector<double>> values;
  std::vector<int> parents;
  OpParams params;
  bool requires_grad = false;
};

class Tape {
 public:
  // retain_for_higher_order controls whether a backward pass may itself be
  // recorded (grad with create_graph).
  explicit Tape(bool retain_for_higher_order = true)
      : retain_(retain_for_higher_order) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool retains_higher_order() const { return retain_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node_at(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true) {
    if (shape_size(shape) != static_cast<std::int64_t>(values.size())) {
      throw std::invalid_argument("Tape::leaf: shape/value mismatch");
    }
    check_finite(values, "tape leaf");
    return append(OpKind::kLeaf, std::move(shape),
                  std::make_shared<const std::vector<double>>(std::move(values)),
                  {}, {}, requires_grad);
  }

  // Registers an existing (typically detached) tensor as a leaf; payload is
  // shared, not copied.
  Tensor leaf(const Tensor& t, bool requires_grad = true) {
    if (!t.defined()) throw std::invalid_argument("Tape::leaf: undefined tensor");
    check_finite(t.values(), "tape leaf");
    return append(OpKind::kLeaf, t.shape(), t.payload(), {}, {}, requires_grad);
  }

  Tensor constant(const Tensor& t) { return leaf(t, false); }

  // Records one primitive. Inputs may live on this tape or be detached
  // constants (auto-registered). The forward value is computed eagerly.
  Tensor record(OpKind kind, const std::vector<Tensor>& inputs,
                OpParams params = {}) {
    std::vector<int> parents;
    parents.reserve(inputs.size());
    bool rg = false;
    for (const Tensor& t : inputs) {
      if (!t.defined()) {
        throw std::invalid_argument("Tape::record: undefined input tensor");
      }
      int id;
      if (t.on_tape()) {
        if (t.tape() != this) {
          throw std::invalid_argument("Tape::record: input belongs to another tape");
        }
        id = t.node();
      } else {
        id = constant(t).node();
      }
      parents.push_back(id);
      rg = rg || nodes_[static_cast<std::size_t>(id)].requires_grad;
    }

    std::vector<detail::View> views;
    views.reserve(parents.size());
    for (int id : parents) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      views.push_back(detail::View{&n.shape, n.values.get()});
    }
    detail::Payload out = detail::eval_op(kind, params, views);
    return append(kind, std::move(out.shape),
                  std::make_shared<const std::vector<double>>(std::move(out.values)),
                  std::move(parents), std::move(params), rg);
  }

  // d(loss)/d(wrt). When create_graph is set the returned gradients are live
  // tape tensors and can be differentiated again; otherwise they are plain
  // constants and the tape is left untouched.
  std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& wrt,
                           bool create_graph);

  Tensor handle(int id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return Tensor(n.shape, n.values, this, id);
  }

  // Re-executes every non-leaf node from its parents and checks the recorded
  // forward values bit-for-bit. Test hook for tape integrity.
  bool replay_matches() const {
    for (const Node& n : nodes_) {
      if (n.kind == OpKind::kLeaf) continue;
      std::vector<detail::View> views;
      views.reserve(n.parents.size());
      for (int id : n.parents) {
        const Node& p = nodes_[static_cast<std::size_t>(id)];
        views.push_back(detail::View{&p.shape, p.values.get()});
      }
      detail::Payload redo = detail::eval_op(n.kind, n.params, views);
      if (redo.shape != n.shape || redo.values != *n.values) return false;
    }
    return true;
  }

 private:
  Tensor append(OpKind kind, Shape shape,
                std::shared_ptr<const std::vector<double>> values,
                std::vector<int> parents, OpParams params, bool requires_grad) {
    Node n;
    n.kind = kind;
    n.shape = std::move(shape);
    n.values = std::move(values);
    n.parents = std::move(parents);
    n.params = std::move(params);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    return Tensor(nodes_.back().shape, nodes_.back().values, this, id);
  }

  friend class GradEmitter;

  std::vector<Node> nodes_;
  bool retain_;
};

// Evaluates backward-rule expressions either as new tape nodes (create_graph)
// or as plain off-tape arithmetic.
class GradEmitter {
 public:
  GradEmitter(Tape& tape, bool record) : tape_(tape), record_(record) {}

  Tensor apply(OpKind kind, const std::vector<Tensor>& in, OpParams p = {}) {
    if (record_) return tape_.record(kind, in, std::move(p));
    std::vector<detail::View> views;
    views.reserve(in.size());
    for (const Tensor& t : in) {
      views.push_back(detail::View{&t.shape(), &t.values()});
    }
    detail::Payload out = detail::eval_op(kind, p, views);
    return Tensor::constant(std::move(out.shape), std::move(out.values));
  }

  Tensor constant(Shape shape, std::vector<double> values) {
    Tensor c = Tensor::constant(std::move(shape), std::move(values));
    return record_ ? tape_.constant(c) : c;
  }

  Tensor zeros(const Shape& shape) {
    Tensor z = Tensor::zeros(shape);
    return record_ ? tape_.constant(z) : z;
  }

  Tensor add(const Tensor& a, const Tensor& b) { return apply(OpKind::kAdd, {a, b}); }
  Tensor mul(const Tensor& a, const Tensor& b) { return apply(OpKind::kMul, {a, b}); }
  Tensor scale(const Tensor& a, double c) {
    return apply(OpKind::kScale, {a}, OpParams{{}, {c}});
  }
  Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }
  Tensor matmul(const Tensor& a, const Tensor& b) {
    return apply(OpKind::kMatmul, {a, b});
  }
  Tensor transpose(const Tensor& a) { return apply(OpKind::kTranspose, {a}); }
  Tensor reshape(const Tensor& a, const Shape& s) {
    return apply(OpKind::kReshape, {a}, OpParams{std::vector<int>(s.begin(), s.end()), {}});
  }
  Tensor slice_rows(const Tensor& a, int r0, int r1) {
    return apply(OpKind::kSliceRows, {a}, OpParams{{r0, r1}, {}});
  }
  Tensor pad_rows(const Tensor& a, int offset, int total) {
    return apply(OpKind::kPadRows, {a}, OpParams{{offset, total}, {}});
  }
  Tensor sum(const Tensor& a) { return apply(OpKind::kSumAll, {a}); }
  Tensor row_sum(const Tensor& a) { return apply(OpKind::kRowSum, {a}); }
  Tensor broadcast_cols(const Tensor& a, int n) {
    return apply(OpKind::kBroadcastCols, {a}, OpParams{{n}, {}});
  }
  Tensor broadcast_scalar(const Tensor& a, const Shape& s) {
    return apply(OpKind::kBroadcastScalar, {a},
                 OpParams{std::vector<int>(s.begin(), s.end()), {}});
  }
  Tensor softmax_rows(const Tensor& a) { return apply(OpKind::kSoftmaxRows, {a}); }
  Tensor gather_rows(const Tensor& a, const std::vector<int>& ids) {
    return apply(OpKind::kGatherRows, {a}, OpParams{ids, {}});
  }
  Tensor scatter_rows(const Tensor& a, const std::vector<int>& ids, int total) {
    OpParams p;
    p.ints.reserve(ids.size() + 1);
    p.ints.push_back(total);
    p.ints.insert(p.ints.end(), ids.begin(), ids.end());
    return apply(OpKind::kScatterRows, {a}, std::move(p));
  }

 private:
  Tape& tape_;
  bool record_;
};

namespace detail {

// Per-parent gradient contributions for one node. `g` is the adjoint of the
// node's output; `self` is the node's own output handle (needed by softmax
// and tanh whose derivatives are cheapest in terms of the output).
inline std::vector<Tensor> backward_op(Tape& tape, const Node& n,
                                       const Tensor& self, const Tensor& g,
                                       GradEmitter& em) {
  auto parent = [&](std::size_t i) { return tape.handle(n.parents[i]); };
  switch (n.kind) {
    case OpKind::kLeaf:
      return {};
    case OpKind::kAdd:
      return {g, g};
    case OpKind::kMul:
      return {em.mul(g, parent(1)), em.mul(g, parent(0))};
    case OpKind::kScale:
      return {em.scale(g, n.params.reals[0])};
    case OpKind::kMatmul:
      return {em.matmul(g, em.transpose(parent(1))),
              em.matmul(em.transpose(parent(0)), g)};
    case OpKind::kTranspose:
      return {em.transpose(g)};
    case OpKind::kReshape:
      return {em.reshape(g, parent(0).shape())};
    case OpKind::kSliceRows:
      return {em.pad_rows(g, n.params.ints[0], parent(0).rows())};
    case OpKind::kPadRows:
      return {em.slice_rows(g, n.params.ints[0],
                            n.params.ints[0] + parent(0).rows())};
    case OpKind::kConcatRows: {
      std::vector<Tensor> out;
      out.reserve(n.parents.size());
      int off = 0;
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        const int r = parent(i).rows();
        out.push_back(em.slice_rows(g, off, off + r));
        off += r;
      }
      return out;
    }
    case OpKind::kSumAll:
      return {em.broadcast_scalar(g, parent(0).shape())};
    case OpKind::kRowSum:
      return {em.broadcast_cols(g, parent(0).cols())};
    case OpKind::kBroadcastCols:
      return {em.row_sum(g)};
    case OpKind::kBroadcastScalar:
      return {em.sum(g)};
    case OpKind::kSoftmaxRows: {
      // dX = y * (g - rowsum(g * y))
      const Tensor t = em.mul(g, self);
      const Tensor s = em.broadcast_cols(em.row_sum(t), self.cols());
      return {em.mul(self, em.sub(g, s))};
    }
    case OpKind::kSoftmaxXent: {
      // d/dlogits = w_i/sum(w) * (softmax(row) - onehot(label)), times the
      // incoming scalar adjoint. Expressed through softmax so the rule stays
      // differentiable.
      const Tensor logits = parent(0);
      const int m = logits.rows(), v = logits.cols();
      double wsum = 0.0;
      for (double w : n.params.reals) wsum += w;
      std::vector<double> neg_onehot(static_cast<std::size_t>(m) * v, 0.0);
      std::vector<double> weights(static_cast<std::size_t>(m) * v, 0.0);
      for (int i = 0; i < m; ++i) {
        const double w = n.params.reals[static_cast<std::size_t>(i)] / wsum;
        neg_onehot[static_cast<std::size_t>(i) * v +
                   static_cast<std::size_t>(n.params.ints[static_cast<std::size_t>(i)])] = -1.0;
        for (int j = 0; j < v; ++j) {
          weights[static_cast<std::size_t>(i) * v + static_cast<std::size_t>(j)] = w;
        }
      }
      const Tensor probs = em.softmax_rows(logits);
      const Tensor diff = em.add(probs, em.constant({m, v}, std::move(neg_onehot)));
      const Tensor scaled = em.mul(diff, em.constant({m, v}, std::move(weights)));
      return {em.mul(scaled, em.broadcast_scalar(g, Shape{m, v}))};
    }
    case OpKind::kRelu: {
      const Tensor x = parent(0);
      std::vector<double> mask(x.values().size());
      for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = x.values()[i] > 0.0 ? 1.0 : 0.0;
      }
      return {em.mul(g, em.constant(x.shape(), std::move(mask)))};
    }
    case OpKind::kTanh: {
      // 1 - y^2 through the recorded output, so second order works.
      const Tensor ones =
          em.constant(self.shape(),
                      std::vector<double>(static_cast<std::size_t>(self.size()), 1.0));
      return {em.mul(g, em.sub(ones, em.mul(self, self)))};
    }
    case OpKind::kGatherRows:
      return {em.scatter_rows(g, n.params.ints, parent(0).rows())};
    case OpKind::kScatterRows: {
      std::vector<int> ids(n.params.ints.begin() + 1, n.params.ints.end());
      return {em.gather_rows(g, ids)};
    }
  }
  return {};
}

}  // namespace detail

inline std::vector<Tensor> Tape::grad(const Tensor& loss,
                                      const std::vector<Tensor>& wrt,
                                      bool create_graph) {
  if (!loss.defined() || loss.tape() != this) {
    throw std::invalid_argument("grad: loss is not on this tape");
  }
  if (loss.size() != 1) {
    throw std::invalid_argument("grad: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  }
  if (create_graph && !retain_) {
    throw std::invalid_argument(
        "grad: tape was not created with retain_for_higher_order");
  }
  for (const Tensor& w : wrt) {
    if (!w.defined() || w.tape() != this) {
      throw std::invalid_argument("grad: wrt tensor detached from tape");
    }
  }
  check_finite(loss.values(), "loss");

  const int loss_id = loss.node();
  GradEmitter em(*this, create_graph);
  std::vector<Tensor> adjoint(static_cast<std::size_t>(loss_id) + 1);
  adjoint[static_cast<std::size_t>(loss_id)] = em.constant({1}, {1.0});

  for (int id = loss_id; id >= 0; --id) {
    Tensor g = adjoint[static_cast<std::size_t>(id)];
    if (!g.defined()) continue;
    // Copy: emitting backward nodes may reallocate the node vector.
    const Node n = nodes_[static_cast<std::size_t>(id)];
    if (n.kind == OpKind::kLeaf || !n.requires_grad) continue;
    std::vector<Tensor> contribs = detail::backward_op(*this, n, handle(id), g, em);
    for (std::size_t j = 0; j < n.parents.size(); ++j) {
      const int pid = n.parents[j];
      if (!nodes_[static_cast<std::size_t>(pid)].requires_grad) continue;
      Tensor& slot = adjoint[static_cast<std::size_t>(pid)];
      slot = slot.defined() ? em.add(slot, contribs[j]) : contribs[j];
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    Tensor g = adjoint[static_cast<std::size_t>(w.node())];
    if (!g.defined()) g = em.zeros(w.shape());
    check_finite(g.values(), "gradient");
    out.push_back(create_graph ? g : g.detached());
  }
  return out;
}

}  // namespace metaprompt
