#pragma once

// Free-function fronts for the tape primitives. If any input carries a tape
// handle the op is recorded there; with only detached inputs it evaluates
// off-tape and returns a constant. The same code therefore serves training
// (recorded) and inference/oracles (pure evaluation).

#include <stdexcept>
#include <vector>

#include "metaprompt/tape.hpp"
#include "metaprompt/tensor.hpp"

namespace metaprompt::ops {

namespace detail_ops {

inline Tape* common_tape(const std::vector<Tensor>& inputs) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (!t.on_tape()) continue;
    if (tape != nullptr && tape != t.tape()) {
      throw std::invalid_argument("ops: inputs belong to different tapes");
    }
    tape = t.tape();
  }
  return tape;
}

inline Tensor apply(OpKind kind, const std::vector<Tensor>& inputs,
                    OpParams params = {}) {
  if (Tape* tape = common_tape(inputs)) {
    return tape->record(kind, inputs, std::move(params));
  }
  std::vector<detail::View> views;
  views.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    views.push_back(detail::View{&t.shape(), &t.values()});
  }
  detail::Payload out = detail::eval_op(kind, params, views);
  return Tensor::constant(std::move(out.shape), std::move(out.values));
}

}  // namespace detail_ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail_ops::apply(OpKind::kAdd, {a, b});
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail_ops::apply(OpKind::kMul, {a, b});
}

inline Tensor scale(const Tensor& a, double c) {
  return detail_ops::apply(OpKind::kScale, {a}, OpParams{{}, {c}});
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  return detail_ops::apply(OpKind::kMatmul, {a, b});
}

inline Tensor transpose(const Tensor& a) {
  return detail_ops::apply(OpKind::kTranspose, {a});
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  return detail_ops::apply(OpKind::kReshape, {a},
                           OpParams{std::vector<int>(shape.begin(), shape.end()), {}});
}

inline Tensor slice_rows(const Tensor& a, int begin, int end) {
  return detail_ops::apply(OpKind::kSliceRows, {a}, OpParams{{begin, end}, {}});
}

inline Tensor pad_rows(const Tensor& a, int offset, int total_rows) {
  return detail_ops::apply(OpKind::kPadRows, {a}, OpParams{{offset, total_rows}, {}});
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  return detail_ops::apply(OpKind::kConcatRows, parts);
}

inline Tensor sum(const Tensor& a) { return detail_ops::apply(OpKind::kSumAll, {a}); }

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor row_sum(const Tensor& a) {
  return detail_ops::apply(OpKind::kRowSum, {a});
}

inline Tensor broadcast_cols(const Tensor& a, int cols) {
  return detail_ops::apply(OpKind::kBroadcastCols, {a}, OpParams{{cols}, {}});
}

inline Tensor broadcast_scalar(const Tensor& a, const Shape& shape) {
  return detail_ops::apply(OpKind::kBroadcastScalar, {a},
                           OpParams{std::vector<int>(shape.begin(), shape.end()), {}});
}

inline Tensor softmax_rows(const Tensor& a) {
  return detail_ops::apply(OpKind::kSoftmaxRows, {a});
}

// Weighted mean over rows of -log softmax(logits)[label]. `weights` is the
// 0/1 supervision mask (must not be all zero).
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& labels,
                                    const std::vector<double>& weights) {
  return detail_ops::apply(OpKind::kSoftmaxXent, {logits},
                           OpParams{labels, weights});
}

inline Tensor relu(const Tensor& a) { return detail_ops::apply(OpKind::kRelu, {a}); }

inline Tensor tanh(const Tensor& a) { return detail_ops::apply(OpKind::kTanh, {a}); }

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& ids) {
  return detail_ops::apply(OpKind::kGatherRows, {a}, OpParams{ids, {}});
}

inline Tensor scatter_rows(const Tensor& a, const std::vector<int>& ids,
                           int total_rows) {
  OpParams p;
  p.ints.reserve(ids.size() + 1);
  p.ints.push_back(total_rows);
  p.ints.insert(p.ints.end(), ids.begin(), ids.end());
  return detail_ops::apply(OpKind::kScatterRows, {a}, std::move(p));
}

}  // namespace metaprompt::ops
