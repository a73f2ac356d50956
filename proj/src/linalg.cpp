#include "sbc/linalg.hpp"

#include <Eigen/Cholesky>

#include <cmath>

namespace sbc::linalg {

Matrix spd_inverse(const Matrix& h, double damp) {
  if (h.rows() != h.cols())
    throw ShapeMismatch("spd_inverse: matrix is " + std::to_string(h.rows()) +
                        "x" + std::to_string(h.cols()));
  if (damp < 0.0) throw InvalidArgument("spd_inverse: negative dampening");
  const Eigen::Index n = h.rows();
  if (n == 0) return Matrix(0, 0);
  Matrix a = h;
  if (damp > 0.0) {
    double lambda = damp * h.diagonal().mean();
    a.diagonal().array() += lambda;
  }
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefinite("spd_inverse: Cholesky factorization failed");
  Matrix inv = llt.solve(Matrix::Identity(n, n));
  // The solve is not exactly symmetric; the downstream updates assume it is.
  inv = ((inv + inv.transpose()) * 0.5).eval();
  return inv;
}

Matrix delete_row_col(const Matrix& m, int p) {
  return delete_rows_cols(m, IndexSet::single(p));
}

Matrix delete_rows_cols(const Matrix& m, const IndexSet& p) {
  const Eigen::Index n = m.rows();
  if (m.cols() != n) throw ShapeMismatch("delete_rows_cols: square input required");
  if (p.max_index() >= n)
    throw InvalidArgument("delete_rows_cols: index out of range");
  std::vector<int> keep;
  keep.reserve(n - p.size());
  for (int i = 0; i < n; ++i)
    if (!p.contains(i)) keep.push_back(i);
  Matrix out(keep.size(), keep.size());
  for (std::size_t r = 0; r < keep.size(); ++r)
    for (std::size_t c = 0; c < keep.size(); ++c)
      out(r, c) = m(keep[r], keep[c]);
  return out;
}

void inverse_remove_in_place(Matrix& hinv, int p) {
  const Eigen::Index n = hinv.rows();
  if (hinv.cols() != n) throw ShapeMismatch("inverse_remove: square input required");
  if (p < 0 || p >= n) throw InvalidArgument("inverse_remove: index out of range");
  const double pivot = hinv(p, p);
  if (std::abs(pivot) < kPivotEpsilon)
    throw SingularPivot("inverse_remove: |Hinv(p,p)| = " +
                        std::to_string(std::abs(pivot)) + " at p = " +
                        std::to_string(p));
  Vector col = hinv.col(p);
  hinv.noalias() -= (col / pivot) * col.transpose();
  // The rank-1 downdate leaves roundoff in the dead row/column; pin it to
  // exact zero so masked state never leaks back into later selections.
  hinv.row(p).setZero();
  hinv.col(p).setZero();
}

void inverse_remove_block_in_place(Matrix& hinv, const IndexSet& p) {
  const Eigen::Index n = hinv.rows();
  if (hinv.cols() != n)
    throw ShapeMismatch("inverse_remove_block: square input required");
  if (p.empty()) return;
  if (p.max_index() >= n)
    throw InvalidArgument("inverse_remove_block: index out of range");
  const int k = p.size();
  if (k == 1) {
    int q = p.values()[0];
    if (std::abs(hinv(q, q)) < kPivotEpsilon)
      throw SingularBlock("inverse_remove_block: singular 1x1 block at " +
                          std::to_string(q));
    inverse_remove_in_place(hinv, q);
    return;
  }
  Matrix cols(n, k);
  Matrix block(k, k);
  for (int j = 0; j < k; ++j) {
    cols.col(j) = hinv.col(p.values()[j]);
    for (int i = 0; i < k; ++i) block(i, j) = hinv(p.values()[i], p.values()[j]);
  }
  Eigen::LLT<Matrix> llt(block);
  if (llt.info() != Eigen::Success)
    throw SingularBlock("inverse_remove_block: block of size " +
                        std::to_string(k) + " is not positive definite");
  double dmin = llt.matrixLLT().diagonal().minCoeff();
  if (!(dmin * dmin >= kPivotEpsilon))
    throw SingularBlock("inverse_remove_block: block pivot underflow");
  Matrix solved = llt.solve(cols.transpose());  // k x n
  hinv.noalias() -= cols * solved;
  for (int j = 0; j < k; ++j) {
    hinv.row(p.values()[j]).setZero();
    hinv.col(p.values()[j]).setZero();
  }
}

Vector block_solve(const Matrix& hinv, const IndexSet& p, const Vector& rhs) {
  const Eigen::Index n = hinv.rows();
  if (hinv.cols() != n) throw ShapeMismatch("block_solve: square input required");
  if (p.max_index() >= n) throw InvalidArgument("block_solve: index out of range");
  const int k = p.size();
  if (rhs.size() != k) throw ShapeMismatch("block_solve: rhs length mismatch");
  if (k == 0) return Vector(0);
  Matrix block(k, k);
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < k; ++i) block(i, j) = hinv(p.values()[i], p.values()[j]);
  Eigen::LLT<Matrix> llt(block);
  if (llt.info() != Eigen::Success)
    throw SingularBlock("block_solve: block of size " + std::to_string(k) +
                        " is not positive definite");
  double dmin = llt.matrixLLT().diagonal().minCoeff();
  if (!(dmin * dmin >= kPivotEpsilon))
    throw SingularBlock("block_solve: block pivot underflow");
  return llt.solve(rhs);
}

Matrix inverse_remove(const Matrix& hinv, int p) {
  Matrix work = hinv;
  inverse_remove_in_place(work, p);
  return delete_row_col(work, p);
}

Matrix inverse_remove_block(const Matrix& hinv, const IndexSet& p) {
  Matrix work = hinv;
  inverse_remove_block_in_place(work, p);
  return delete_rows_cols(work, p);
}

double max_rel_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch("max_rel_diff: shape mismatch");
  double worst = 0.0;
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double scale = std::max(std::abs(a(i, j)), std::abs(b(i, j)));
      double diff = std::abs(a(i, j) - b(i, j));
      worst = std::max(worst, scale > 1e-12 ? diff / scale : diff);
    }
  return worst;
}

}  // namespace sbc::linalg
