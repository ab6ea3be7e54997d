#ifndef BITFOLD_TENSOR_HPP_
#define BITFOLD_TENSOR_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bitfold/error.hpp"

namespace bitfold {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

std::string shape_string(const Shape& shape);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major n-d array. The last axis is the "feature" axis; matrix()
/// views the data as (size / last) x last.
template <typename Scalar>
class BasicTensor {
public:
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      fail(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) + " for shape " +
                                         shape_string(shape_));
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{1}, std::vector<Scalar>{v}); }
  template <typename Derived>
  static BasicTensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    BasicTensor t(Shape{static_cast<int>(m.rows()), static_cast<int>(m.cols())});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(axis < 0 ? axis + rank() : axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }
  Scalar& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  const Scalar& at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  Scalar& at(int i, int j, int k) {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  const Scalar& at(int i, int j, int k) const {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  Scalar item() const {
    if (data_.size() != 1) fail(ErrorCode::NotScalar, "item() on shape " + shape_string(shape_));
    return data_[0];
  }

  int cols() const { return shape_.empty() ? 1 : shape_.back(); }
  int rows() const { return cols() == 0 ? 0 : static_cast<int>(data_.size() / cols()); }
  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  BasicTensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      fail(ErrorCode::ShapeMismatch, "reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    return BasicTensor(std::move(shape), data_);
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    for (const Scalar& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<double>;

double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace bitfold

#endif
