#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dcco/errors.hpp"

namespace dcco {

using Index = Eigen::Index;

// Row-major so the flat value order matches the documented wire layouts.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense tensor of 64-bit floats, rank 0 to 2, backed by an Eigen matrix.
// Rank 0 is a scalar (1x1 storage), rank 1 a length-n vector (1xn storage),
// rank 2 an r x c matrix. All computation in the project flows through these.
class Tensor {
 public:
  Tensor() : shape_{}, m_(Matrix::Zero(1, 1)) {}

  static Tensor scalar(double v) {
    Tensor t;
    t.m_(0, 0) = v;
    return t;
  }

  static Tensor zeros(std::vector<Index> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.check_rank();
    t.m_ = Matrix::Zero(t.view_rows(), t.view_cols());
    return t;
  }

  static Tensor ones(std::vector<Index> shape) {
    Tensor t = zeros(std::move(shape));
    t.m_.setOnes();
    return t;
  }

  // Takes ownership of a matrix as a rank-2 tensor.
  static Tensor from_matrix(Matrix m) {
    Tensor t;
    t.shape_ = {m.rows(), m.cols()};
    t.m_ = std::move(m);
    return t;
  }

  // Reinterprets a matrix under an explicit shape (element count must agree).
  static Tensor from_matrix(Matrix m, std::vector<Index> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.check_rank();
    if (m.rows() != t.view_rows() || m.cols() != t.view_cols()) {
      throw ShapeMismatch("Tensor: matrix " + dims_str(m.rows(), m.cols()) +
                          " does not match shape " + t.shape_str());
    }
    t.m_ = std::move(m);
    return t;
  }

  Tensor(std::vector<Index> shape, std::vector<double> values) {
    shape_ = std::move(shape);
    check_rank();
    Index n = 1;
    for (Index d : shape_) n *= d;
    if (static_cast<Index>(values.size()) != n) {
      throw ShapeMismatch("Tensor: " + std::to_string(values.size()) +
                          " values for shape " + shape_str());
    }
    m_.resize(view_rows(), view_cols());
    for (Index i = 0; i < n; ++i) m_.data()[i] = values[static_cast<std::size_t>(i)];
  }

  const std::vector<Index>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index size() const { return m_.size(); }

  // Dimensions of the 2-D view (rank 0 -> 1x1, rank 1 -> 1xn).
  Index rows() const { return m_.rows(); }
  Index cols() const { return m_.cols(); }

  Matrix& mat() { return m_; }
  const Matrix& mat() const { return m_; }

  double scalar_value() const {
    if (size() != 1) throw ShapeMismatch("Tensor: scalar_value on shape " + shape_str());
    return m_(0, 0);
  }

  // Flat row-major values.
  std::span<const double> values() const { return {m_.data(), static_cast<std::size_t>(m_.size())}; }
  std::span<double> values_mut() { return {m_.data(), static_cast<std::size_t>(m_.size())}; }

  bool all_finite() const { return m_.allFinite(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Rebuilds a tensor of this tensor's shape around new contents.
  Tensor with_same_shape(Matrix m) const { return from_matrix(std::move(m), shape_); }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  Index view_rows() const {
    return shape_.size() == 2 ? shape_[0] : 1;
  }
  Index view_cols() const {
    if (shape_.empty()) return 1;
    return shape_.back();
  }
  void check_rank() const {
    if (shape_.size() > 2) throw ShapeMismatch("Tensor: rank > 2 unsupported");
    for (Index d : shape_) {
      if (d <= 0) throw ShapeMismatch("Tensor: non-positive dimension in " + shape_str());
    }
  }
  static std::string dims_str(Index r, Index c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

  std::vector<Index> shape_;
  Matrix m_;
};

// Stacks rank-2 tensors with equal column counts along the row axis.
Tensor vstack(std::span<const Tensor> parts);

// Deterministic product with row-stable accumulation: each output row is
// computed as row(a) * b, so a sample's result does not depend on which other
// rows share the batch.
Matrix row_stable_product(const Matrix& a, const Matrix& b);

}  // namespace dcco
