#pragma once

#include <Eigen/Dense>

#include <string>

namespace dakit {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

// Symmetry test used by the Gaussian invariants: max|M - M^T| <= rel * (1 + max|M|).
bool is_symmetric(const Matrix& m, double rel = 1e-12);

// Lower Cholesky factor of a symmetric positive definite matrix; throws an
// error of the given kind (with `what` as context) when the factorization fails.
Matrix cholesky_lower(const Matrix& spd, const std::string& what);

// Returns F with F F^T = C for a PSD matrix. Uses Cholesky when possible and
// falls back to an eigen-decomposition with negative eigenvalues floored at 0.
Matrix psd_factor(const Matrix& cov);

// Solves S X = B for SPD S; throws a numeric error when S is not SPD.
Matrix spd_solve(const Matrix& spd, const Matrix& rhs, const std::string& what);

Matrix spd_inverse(const Matrix& spd, const std::string& what);

double spd_logdet(const Matrix& spd, const std::string& what);

// x^T S^{-1} x.
double mahalanobis_sq(const Vector& x, const Matrix& spd, const std::string& what);

// Ratio of extreme eigenvalues of a symmetric matrix (inf when singular).
double condition_number_sym(const Matrix& sym);

double min_eigenvalue_sym(const Matrix& sym);

bool all_finite(const Matrix& m);

}  // namespace dakit
