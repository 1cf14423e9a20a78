#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rdevos/errors.hpp"

namespace rdevos {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array. Storage is an Eigen column array so
/// pointwise work can use Eigen expressions; 2-D views map as row-major
/// matrices.
template <typename Scalar_>
class BasicTensor {
 public:
  using Scalar = Scalar_;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMajorMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

  /// Rank-0 tensor holding a single zero.
  BasicTensor() : data_(Storage::Zero(1)) {}

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Storage::Zero(numel(shape_));
  }

  BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }

  BasicTensor(Shape shape, const std::vector<Scalar>& values)
      : BasicTensor(std::move(shape),
                    Storage(Eigen::Map<const Storage>(values.data(), static_cast<Index>(values.size())))) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static BasicTensor scalar(Scalar value) { return BasicTensor(Shape{}, Storage::Constant(1, value)); }

  template <typename Rng>
  static BasicTensor normal(Shape shape, Rng& rng, Scalar stddev = Scalar(1)) {
    BasicTensor t(std::move(shape));
    std::normal_distribution<Scalar> dist(Scalar(0), stddev);
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = dist(rng);
    return t;
  }

  template <typename Rng>
  static BasicTensor uniform(Shape shape, Rng& rng, Scalar lo, Scalar hi) {
    BasicTensor t(std::move(shape));
    std::uniform_real_distribution<Scalar> dist(lo, hi);
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = dist(rng);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(normalize_axis(axis))); }
  Index size() const { return data_.size(); }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  /// Row-major matrix view; rank-1 tensors map as a single row.
  MatrixMap matrix() {
    auto [r, c] = matrix_dims();
    return MatrixMap(data_.data(), r, c);
  }
  ConstMatrixMap matrix() const {
    auto [r, c] = matrix_dims();
    return ConstMatrixMap(data_.data(), r, c);
  }

  BasicTensor reshaped(Shape shape) const& {
    BasicTensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  BasicTensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }

  void reshape(Shape shape) {
    check_shape(shape);
    if (numel(shape) != size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    shape_ = std::move(shape);
  }

  bool all_finite() const { return data_.isFinite().all(); }

  int normalize_axis(int axis) const {
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
    }
    return a;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    if (a.shape_ != b.shape_) return false;
    for (Index i = 0; i < a.size(); ++i) {
      if (a.data_[i] != b.data_[i]) return false;
    }
    return true;
  }

 private:
  static void check_shape(const Shape& shape) {
    for (Index d : shape) {
      if (d < 1) throw DimensionError("tensor dimensions must be >= 1, got " + to_string(shape));
    }
  }

  std::pair<Index, Index> matrix_dims() const {
    if (rank() == 2) return {shape_[0], shape_[1]};
    if (rank() == 1) return {1, shape_[0]};
    throw DimensionError("matrix view needs rank 1 or 2, got " + to_string(shape_));
  }

  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw DimensionError("index rank mismatch");
    Index off = 0;
    std::size_t k = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[k]) throw DimensionError("index out of range");
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;

/// Max absolute elementwise difference; throws on shape mismatch.
template <typename Scalar>
Scalar max_abs_diff(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.size() == 0) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

/// Decomposition of a shape around one axis: outer x axis x inner.
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i < axis) s.outer *= shape[i];
    else if (i == axis) s.extent = shape[i];
    else s.inner *= shape[i];
  }
  return s;
}

}  // namespace rdevos
