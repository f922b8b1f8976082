#include "dakit/metrics.hpp"

#include "dakit/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace dakit::metrics {

double GridDensity::spacing() const { return nodes.size() > 1 ? nodes(1) - nodes(0) : 1.0; }

void GridDensity::validate() const {
    require(nodes.size() >= 2 && nodes.size() == values.size(), ErrorKind::argument,
            "grid density: need at least two nodes and one value per node");
    const double h = spacing();
    require(h > 0.0, ErrorKind::argument, "grid density: nodes must increase");
    for (Eigen::Index i = 1; i < nodes.size(); ++i)
        require(std::abs((nodes(i) - nodes(i - 1)) - h) <= 1e-9 * h, ErrorKind::argument,
                "grid density: spacing is not uniform");
    require((values.array() >= 0.0).all() && values.allFinite(), ErrorKind::argument,
            "grid density: values must be finite and nonnegative");
    require(std::abs(h * values.sum() - 1.0) <= 1e-6, ErrorKind::argument,
            "grid density: does not integrate to one");
}

GridDensity GridDensity::gaussian(double mean, double var, double lo, double hi, Eigen::Index cells) {
    return tabulate(lo, hi, cells, [=](double x) {
        return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
    });
}

namespace {

void require_shared_grid(const GridDensity& p, const GridDensity& q) {
    p.validate();
    q.validate();
    require(p.nodes.size() == q.nodes.size(), ErrorKind::argument, "densities live on different grids");
    const double h = p.spacing();
    require((p.nodes - q.nodes).cwiseAbs().maxCoeff() <= 1e-9 * h, ErrorKind::argument,
            "densities live on different grids");
}

// CDF at the cell edges, normalized to end at exactly one.
std::vector<double> edge_cdf(const GridDensity& p) {
    std::vector<double> f(static_cast<std::size_t>(p.values.size()) + 1, 0.0);
    for (Eigen::Index i = 0; i < p.values.size(); ++i)
        f[static_cast<std::size_t>(i) + 1] = f[static_cast<std::size_t>(i)] + p.values(i);
    const double total = f.back();
    for (double& v : f) v /= total;
    f.back() = 1.0;
    return f;
}

double quantile(const GridDensity& p, const std::vector<double>& cdf, double alpha) {
    const double h = p.spacing();
    const double first_edge = p.nodes(0) - 0.5 * h;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), alpha);
    std::size_t cell = static_cast<std::size_t>(std::distance(cdf.begin(), it));
    cell = std::clamp<std::size_t>(cell, 1, cdf.size() - 1) - 1;
    const double lo = cdf[cell], hi = cdf[cell + 1];
    return first_edge + h * (static_cast<double>(cell) + (alpha - lo) / (hi - lo));
}

double sq_dist(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v) {
    return (u - v).squaredNorm();
}

void require_samples(const SampleSet& s, Eigen::Index min_n, const char* what) {
    require(s.points.rows() >= min_n, ErrorKind::argument,
            std::string(what) + ": needs at least " + std::to_string(min_n) + " samples");
    require(s.points.allFinite(), ErrorKind::argument, std::string(what) + ": non-finite sample");
}

enum class DistanceKernel { gaussian, distance };

// Sum of k(|u_i - v_j|^2) over all pairs, or over i != j when the two point
// sets are the same (then only j > i is evaluated and doubled). Squared
// distances are built from coordinate differences rather than the
// |u|^2 + |v|^2 - 2 u.v expansion, one row of u at a time against contiguous
// columns of v so the inner loops vectorize.
double pair_sum(const Matrix& a, const Matrix& b, bool same_set, DistanceKernel kind, double bandwidth) {
    const Eigen::Index n = a.rows(), m = b.rows();
    Eigen::ArrayXd d2(m);
    const double scale = kind == DistanceKernel::gaussian ? -0.5 / (bandwidth * bandwidth) : 0.0;
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index j0 = same_set ? i + 1 : 0;
        const Eigen::Index w = m - j0;
        if (w <= 0) continue;
        auto dist = d2.head(w);
        dist = (b.col(0).segment(j0, w).array() - a(i, 0)).square();
        for (Eigen::Index c = 1; c < a.cols(); ++c) dist += (b.col(c).segment(j0, w).array() - a(i, c)).square();
        total += kind == DistanceKernel::gaussian ? (scale * dist).exp().sum() : dist.sqrt().sum();
    }
    return same_set ? 2.0 * total : total;
}

// Linear kernel sums in closed form: sum_{i != j} u_i.u_j = |sum u|^2 - sum |u_i|^2.
double linear_within(const Matrix& a) {
    const Vector s = a.colwise().sum().transpose();
    return s.squaredNorm() - a.rowwise().squaredNorm().sum();
}

double linear_cross(const Matrix& a, const Matrix& b) {
    return a.colwise().sum().dot(b.colwise().sum());
}

}  // namespace

double tv_grid(const GridDensity& p, const GridDensity& q) {
    require_shared_grid(p, q);
    return 0.5 * p.spacing() * (p.values - q.values).cwiseAbs().sum();
}

double hellinger_grid(const GridDensity& p, const GridDensity& q) {
    require_shared_grid(p, q);
    const double s = (p.values.cwiseSqrt() - q.values.cwiseSqrt()).squaredNorm();
    return std::sqrt(0.5 * p.spacing() * s);
}

double kl_gaussian(const Gaussian& p, const Gaussian& q) {
    const Eigen::Index d = p.dim();
    require(q.dim() == d, ErrorKind::argument, "kl_gaussian: dimension mismatch");
    Eigen::LLT<Matrix> lp(p.cov);
    if (lp.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    const Matrix q_inv_p = spd_solve(q.cov, p.cov, "kl_gaussian: q covariance");
    const Vector dm = p.mean - q.mean;
    const double logdet_ratio = spd_logdet(q.cov, "kl_gaussian") - 2.0 * Matrix(lp.matrixL()).diagonal().array().log().sum();
    const double val = 0.5 * (q_inv_p.trace() - static_cast<double>(d) + mahalanobis_sq(dm, q.cov, "kl_gaussian") +
                              logdet_ratio);
    return std::max(0.0, val);
}

double chi2_gaussian(const Gaussian& p, const Gaussian& q) {
    require(q.dim() == p.dim(), ErrorKind::argument, "chi2_gaussian: dimension mismatch");
    const Matrix m = 2.0 * q.cov - p.cov;
    Eigen::LLT<Matrix> lm(m);
    require(lm.info() == Eigen::Success, ErrorKind::domain,
            "chi2_gaussian: 2 cov_q - cov_p is not positive definite, the integral diverges");
    Eigen::LLT<Matrix> lp(p.cov);
    if (lp.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    // log(1 + chi^2) = logdet Q - logdet P / 2 - logdet(2Q - P) / 2 + dm^T (2Q - P)^{-1} dm
    const Vector dm = p.mean - q.mean;
    const double logdet_m = 2.0 * Matrix(lm.matrixL()).diagonal().array().log().sum();
    const double logdet_p = 2.0 * Matrix(lp.matrixL()).diagonal().array().log().sum();
    const double log1p_chi2 = spd_logdet(q.cov, "chi2_gaussian") - 0.5 * logdet_p - 0.5 * logdet_m + dm.dot(lm.solve(dm));
    return std::max(0.0, std::expm1(log1p_chi2));
}

double wasserstein_p_quantile(const GridDensity& p, const GridDensity& q, double pexp, int alpha_nodes) {
    require(pexp >= 1.0, ErrorKind::argument, "wasserstein: exponent must be at least 1");
    require(alpha_nodes >= 1, ErrorKind::argument, "wasserstein: need at least one quadrature node");
    p.validate();
    q.validate();
    require((p.values.array() > 0.0).all() && (q.values.array() > 0.0).all(), ErrorKind::domain,
            "wasserstein: density vanishes on part of the grid, CDF is not invertible");
    const auto fp = edge_cdf(p), fq = edge_cdf(q);
    double s = 0.0;
    for (int m = 0; m < alpha_nodes; ++m) {
        const double alpha = (m + 0.5) / alpha_nodes;
        s += std::pow(std::abs(quantile(p, fp, alpha) - quantile(q, fq, alpha)), pexp);
    }
    return std::pow(s / alpha_nodes, 1.0 / pexp);
}

double wasserstein1_empirical_1d(const SampleSet& x, const SampleSet& y) {
    require_samples(x, 1, "wasserstein1_empirical_1d");
    require_samples(y, 1, "wasserstein1_empirical_1d");
    require(x.points.cols() == 1 && y.points.cols() == 1, ErrorKind::argument,
            "wasserstein1_empirical_1d: samples must be one-dimensional");
    std::vector<double> a(x.points.data(), x.points.data() + x.points.rows());
    std::vector<double> b(y.points.data(), y.points.data() + y.points.rows());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const auto n = static_cast<std::int64_t>(a.size()), m = static_cast<std::int64_t>(b.size());
    if (n == m) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
        return s / static_cast<double>(n);
    }
    // Both quantile functions are constant between consecutive breakpoints of
    // the merged grid {i/n} U {j/m}; walk it with integer arithmetic on the
    // common denominator n*m.
    std::int64_t i = 0, j = 0, at = 0;
    double s = 0.0;
    while (i < n && j < m) {
        const std::int64_t next_a = (i + 1) * m, next_b = (j + 1) * n;
        const std::int64_t next = std::min(next_a, next_b);
        s += static_cast<double>(next - at) * std::abs(a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(j)]);
        at = next;
        if (next_a == next) ++i;
        if (next_b == next) ++j;
    }
    return s / static_cast<double>(n * m);
}

double Kernel::operator()(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v) const {
    switch (kind) {
        case Kind::gaussian: return std::exp(-0.5 * sq_dist(u, v) / (bandwidth * bandwidth));
        case Kind::linear: return u.dot(v);
        case Kind::negdist: return -std::sqrt(sq_dist(u, v));
    }
    return 0.0;
}

double mmd_sq_ensemble(const SampleSet& x, const SampleSet& y, const Kernel& kernel) {
    require_samples(x, 2, "mmd_sq_ensemble");
    require_samples(y, 2, "mmd_sq_ensemble");
    require(x.points.cols() == y.points.cols(), ErrorKind::argument, "mmd_sq_ensemble: dimension mismatch");
    require(kernel.kind != Kernel::Kind::gaussian || kernel.bandwidth > 0.0, ErrorKind::argument,
            "mmd_sq_ensemble: bandwidth must be positive");
    const double n = static_cast<double>(x.points.rows()), m = static_cast<double>(y.points.rows());
    double wx, wy, cross;
    if (kernel.kind == Kernel::Kind::linear) {
        wx = linear_within(x.points);
        wy = linear_within(y.points);
        cross = linear_cross(x.points, y.points);
    } else {
        const auto kind = kernel.kind == Kernel::Kind::gaussian ? DistanceKernel::gaussian : DistanceKernel::distance;
        const double sign = kernel.kind == Kernel::Kind::gaussian ? 1.0 : -1.0;
        wx = sign * pair_sum(x.points, x.points, true, kind, kernel.bandwidth);
        wy = sign * pair_sum(y.points, y.points, true, kind, kernel.bandwidth);
        cross = sign * pair_sum(x.points, y.points, false, kind, kernel.bandwidth);
    }
    return wx / (n * (n - 1.0)) + wy / (m * (m - 1.0)) - 2.0 * cross / (n * m);
}

double energy_dist_sq_ensemble(const SampleSet& x, const SampleSet& y) {
    require_samples(x, 1, "energy_dist_sq_ensemble");
    require_samples(y, 1, "energy_dist_sq_ensemble");
    require(x.points.cols() == y.points.cols(), ErrorKind::argument, "energy_dist_sq_ensemble: dimension mismatch");
    const auto dist = DistanceKernel::distance;
    const double n = static_cast<double>(x.points.rows()), m = static_cast<double>(y.points.rows());
    const double within_x = n > 1 ? pair_sum(x.points, x.points, true, dist, 0.0) / (n * (n - 1.0)) : 0.0;
    const double within_y = m > 1 ? pair_sum(y.points, y.points, true, dist, 0.0) / (m * (m - 1.0)) : 0.0;
    return 2.0 * pair_sum(x.points, y.points, false, dist, 0.0) / (n * m) - within_x - within_y;
}

std::string result_json(const std::string& metric, double value, const std::map<std::string, std::string>& meta) {
    nlohmann::json j;
    j["metric"] = metric;
    j["value"] = value;
    j["meta"] = nlohmann::json::object();
    for (const auto& [k, v] : meta) j["meta"][k] = v;
    return j.dump();
}

}  // namespace dakit::metrics
