#include "dakit/linalg.hpp"

#include "dakit/error.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace dakit {

bool is_symmetric(const Matrix& m, double rel) {
    if (m.rows() != m.cols()) return false;
    if (m.size() == 0) return true;
    const double scale = 1.0 + m.cwiseAbs().maxCoeff();
    return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel * scale;
}

Matrix cholesky_lower(const Matrix& spd, const std::string& what) {
    require(spd.rows() == spd.cols(), ErrorKind::argument, what + ": matrix is not square");
    Eigen::LLT<Matrix> llt(spd);
    if (llt.info() != Eigen::Success) {
        std::ostringstream os;
        os << what << ": Cholesky factorization failed (min eigenvalue "
           << min_eigenvalue_sym(symmetrize(spd)) << ")";
        fail(ErrorKind::numeric, os.str());
    }
    return llt.matrixL();
}

Matrix psd_factor(const Matrix& cov) {
    if (cov.size() == 0) return cov;
    if (cov.isZero(0.0)) return Matrix::Zero(cov.rows(), cov.cols());
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(cov));
    Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * root.asDiagonal();
}

Matrix spd_solve(const Matrix& spd, const Matrix& rhs, const std::string& what) {
    Eigen::LLT<Matrix> llt(spd);
    if (llt.info() != Eigen::Success) {
        std::ostringstream os;
        os << what << ": matrix is not positive definite (condition "
           << condition_number_sym(symmetrize(spd)) << ")";
        fail(ErrorKind::numeric, os.str());
    }
    return llt.solve(rhs);
}

Matrix spd_inverse(const Matrix& spd, const std::string& what) {
    return spd_solve(spd, Matrix::Identity(spd.rows(), spd.cols()), what);
}

double spd_logdet(const Matrix& spd, const std::string& what) {
    const Matrix l = cholesky_lower(spd, what);
    return 2.0 * l.diagonal().array().log().sum();
}

double mahalanobis_sq(const Vector& x, const Matrix& spd, const std::string& what) {
    const Matrix l = cholesky_lower(spd, what);
    const Vector z = l.triangularView<Eigen::Lower>().solve(x);
    return z.squaredNorm();
}

double condition_number_sym(const Matrix& sym) {
    if (sym.size() == 0) return 1.0;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
    const Vector ev = eig.eigenvalues().cwiseAbs();
    const double lo = ev.minCoeff();
    if (lo == 0.0) return std::numeric_limits<double>::infinity();
    return ev.maxCoeff() / lo;
}

double min_eigenvalue_sym(const Matrix& sym) {
    if (sym.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
    return eig.eigenvalues().minCoeff();
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace dakit
