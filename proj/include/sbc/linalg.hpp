#pragma once

#include "sbc/common.hpp"

namespace sbc::linalg {

/// Smallest inverse diagonal magnitude treated as usable by the removal
/// updates; below this the pivot is considered singular.
inline constexpr double kPivotEpsilon = 1e-12;

/// Inverse of a symmetric positive definite matrix with relative diagonal
/// dampening: returns (H + damp * mean(diag(H)) * I)^-1.
/// Throws NotPositiveDefinite when the (dampened) matrix has no Cholesky
/// factorization, ShapeMismatch for non-square input.
Matrix spd_inverse(const Matrix& h, double damp);

/// Given Hinv = H^-1, return the inverse of H with row/column p deleted
/// (one Sherman-Morrison downdate, result is (n-1)x(n-1)).
/// Throws SingularPivot when |Hinv(p,p)| < kPivotEpsilon.
Matrix inverse_remove(const Matrix& hinv, int p);

/// Block variant: inverse of H with all rows/columns in P deleted
/// (one Woodbury downdate, result is (n-|P|)x(n-|P|)).
/// Throws SingularBlock when the P-submatrix of Hinv is not invertible.
Matrix inverse_remove_block(const Matrix& hinv, const IndexSet& p);

/// In-place masked forms: the matrix keeps its size and the removed
/// rows/columns are set to exactly zero. Dead coordinates stay dead; the
/// alive submatrix equals the physically shrunken inverse.
void inverse_remove_in_place(Matrix& hinv, int p);
void inverse_remove_block_in_place(Matrix& hinv, const IndexSet& p);

/// Solve (Hinv_P) y = rhs for the P-submatrix of hinv via Cholesky.
/// Throws SingularBlock when the submatrix is not positive definite or a
/// pivot underflows.
Vector block_solve(const Matrix& hinv, const IndexSet& p, const Vector& rhs);

/// Largest relative elementwise deviation, with an absolute floor for
/// near-zero references. Shared by tests and verification tools.
double max_rel_diff(const Matrix& a, const Matrix& b);

Matrix delete_row_col(const Matrix& m, int p);
Matrix delete_rows_cols(const Matrix& m, const IndexSet& p);

}  // namespace sbc::linalg
