#include "dcco/tensor.hpp"

#include "dcco/errors.hpp"

namespace dcco {

Tensor vstack(std::span<const Tensor> parts) {
  if (parts.empty()) throw EmptyList("vstack: no tensors given");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 2) throw ShapeMismatch("vstack: all parts must be rank 2");
    if (t.cols() != cols)
      throw ShapeMismatch("vstack: column mismatch, " + std::to_string(t.cols()) + " vs " +
                          std::to_string(cols));
    rows += t.rows();
  }
  Matrix out(rows, cols);
  Index r = 0;
  for (const Tensor& t : parts) {
    out.middleRows(r, t.rows()) = t.mat();
    r += t.rows();
  }
  return Tensor::from_matrix(std::move(out));
}

Matrix row_stable_product(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeMismatch("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()));
  Matrix out(a.rows(), b.cols());
  // Row-by-row products keep each output row's accumulation order a function
  // of that row alone, so a sample's encoding is bitwise identical no matter
  // which batch carries it.
  for (Index i = 0; i < a.rows(); ++i) out.row(i) = a.row(i) * b;
  return out;
}

}  // namespace dcco
