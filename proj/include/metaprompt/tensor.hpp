#pragma once

// Dense double tensors. A Tensor is a value type: an immutable shared payload
// plus an optional handle onto a Tape node. Tensors without a tape handle are
// plain constants and safe to share across threads.

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "metaprompt/common.hpp"

namespace metaprompt {

using Shape = std::vector<int>;

inline std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream ss;
  ss << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) ss << ",";
    ss << shape[i];
  }
  ss << "]";
  return ss.str();
}

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (shape_size(shape) != static_cast<std::int64_t>(values.size())) {
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match value count " +
                                  std::to_string(values.size()));
    }
    check_finite(values, "tensor constant");
    return Tensor(std::move(shape),
                  std::make_shared<const std::vector<double>>(std::move(values)),
                  nullptr, -1);
  }

  static Tensor scalar(double v) { return constant({1}, {v}); }

  static Tensor zeros(Shape shape) {
    const auto n = static_cast<std::size_t>(shape_size(shape));
    return Tensor(std::move(shape),
                  std::make_shared<const std::vector<double>>(n, 0.0), nullptr,
                  -1);
  }

  bool defined() const { return values_ != nullptr; }

  const Shape& shape() const { return shape_; }

  int rows() const { return dim(0); }
  int cols() const { return dim(1); }

  int dim(int i) const {
    if (i >= static_cast<int>(shape_.size())) {
      throw std::invalid_argument("Tensor::dim: rank too small for axis " +
                                  std::to_string(i));
    }
    return shape_[static_cast<std::size_t>(i)];
  }

  std::int64_t size() const { return shape_size(shape_); }

  const std::vector<double>& values() const {
    if (!values_) throw std::logic_error("Tensor: accessing undefined tensor");
    return *values_;
  }

  const std::shared_ptr<const std::vector<double>>& payload() const {
    return values_;
  }

  double scalar_value() const {
    if (size() != 1) {
      throw std::invalid_argument("Tensor: scalar_value on shape " +
                                  shape_str(shape_));
    }
    return values()[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Same payload, no graph handle.
  Tensor detached() const { return Tensor(shape_, values_, nullptr, -1); }

 private:
  friend class Tape;

  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> values,
         Tape* tape, int node)
      : shape_(std::move(shape)),
        values_(std::move(values)),
        tape_(tape),
        node_(node) {}

  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

}  // namespace metaprompt
