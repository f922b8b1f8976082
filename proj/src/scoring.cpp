#include "dakit/scoring.hpp"

#include "dakit/error.hpp"
#include "dakit/io.hpp"

#include <boost/math/special_functions/erf.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace dakit::scoring {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

double normal_quantile(double p) {
    require(p > 0.0 && p < 1.0, ErrorKind::argument, "normal_quantile: level must lie in (0, 1)");
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

ScoreReport ScoreReport::from_scores(std::string rule, std::vector<double> scores) {
    ScoreReport r;
    r.rule = std::move(rule);
    r.scores = std::move(scores);
    r.mean = r.scores.empty() ? 0.0
                              : std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / static_cast<double>(r.scores.size());
    return r;
}

std::string ScoreReport::to_json() const {
    nlohmann::json j;
    j["rule"] = rule;
    j["scores"] = scores;
    j["mean"] = mean;
    return j.dump();
}

double energy_score(const Ensemble& f, const Vector& v, double beta, bool fair) {
    const Eigen::Index n = f.size();
    require(n >= 2, ErrorKind::argument, "energy_score: needs at least two members");
    require(beta > 0.0 && beta <= 2.0, ErrorKind::argument, "energy_score: beta must lie in (0, 2]");
    require(v.size() == f.dim(), ErrorKind::argument, "energy_score: dimension mismatch");
    double to_obs = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) to_obs += std::pow((f.members.row(i).transpose() - v).norm(), beta);
    double pairs = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) pairs += std::pow((f.members.row(i) - f.members.row(j)).norm(), beta);
    pairs *= 2.0;  // ordered pairs i != j
    const double nn = static_cast<double>(n);
    const double spread = fair ? pairs / (2.0 * nn * (nn - 1.0)) : pairs / (2.0 * nn * nn);
    return to_obs / nn - spread;
}

double crps_ensemble(const Ensemble& f, double v, bool fair) {
    require(f.dim() == 1, ErrorKind::argument, "crps_ensemble: ensemble must be scalar");
    return energy_score(f, Vector::Constant(1, v), 1.0, fair);
}

double crps_gaussian(double m, double sigma, double v) {
    require(sigma > 0.0, ErrorKind::argument, "crps_gaussian: sigma must be positive");
    const double z = (v - m) / sigma;
    const double val = sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / std::sqrt(std::numbers::pi));
    return std::max(0.0, val);
}

double forecast_quantile(const Forecast& f, double alpha) {
    require(alpha > 0.0 && alpha < 1.0, ErrorKind::argument, "quantile: level must lie in (0, 1)");
    if (const auto* g = std::get_if<Gaussian>(&f)) {
        require(g->dim() == 1, ErrorKind::argument, "quantile: forecast must be scalar");
        return g->mean(0) + std::sqrt(g->cov(0, 0)) * normal_quantile(alpha);
    }
    if (const auto* e = std::get_if<Ensemble>(&f)) {
        require(e->dim() == 1 && e->size() >= 1, ErrorKind::argument, "quantile: ensemble must be scalar and nonempty");
        std::vector<double> u(e->members.data(), e->members.data() + e->size());
        std::sort(u.begin(), u.end());
        // Type 7: h = (N - 1) alpha, interpolate between order statistics floor(h) and floor(h)+1.
        const double h = static_cast<double>(u.size() - 1) * alpha;
        const auto lo = static_cast<std::size_t>(std::floor(h));
        const std::size_t hi = std::min(lo + 1, u.size() - 1);
        return u[lo] + (h - static_cast<double>(lo)) * (u[hi] - u[lo]);
    }
    fail(ErrorKind::argument, "quantile: weighted ensembles are not supported");
}

double quantile_score(const Forecast& f, double alpha, double v) {
    const double q = forecast_quantile(f, alpha);
    return ((v <= q ? 1.0 : 0.0) - alpha) * (q - v);
}

double log_score(const Gaussian& f, const Vector& v) {
    require(v.size() == f.dim(), ErrorKind::argument, "log_score: dimension mismatch");
    const double d = static_cast<double>(f.dim());
    return 0.5 * mahalanobis_sq(v - f.mean, f.cov, "log_score") + 0.5 * spd_logdet(f.cov, "log_score") +
           0.5 * d * std::log(2.0 * std::numbers::pi);
}

double dawid_sebastiani(const Vector& m, const Matrix& c, const Vector& v) {
    require(m.size() == v.size() && c.rows() == m.size(), ErrorKind::argument, "dawid_sebastiani: dimension mismatch");
    return mahalanobis_sq(v - m, c, "dawid_sebastiani") + spd_logdet(c, "dawid_sebastiani");
}

std::pair<Vector, Matrix> forecast_moments(const Forecast& f) {
    if (const auto* g = std::get_if<Gaussian>(&f)) return {g->mean, g->cov};
    if (const auto* e = std::get_if<Ensemble>(&f)) return ensemble_moments(*e);
    return weighted_moments(std::get<WeightedEnsemble>(f));
}

double spread_error_ratio(const std::vector<Forecast>& forecasts, const Trajectory& truth) {
    require(!forecasts.empty(), ErrorKind::argument, "spread_error_ratio: no forecasts");
    const auto n = static_cast<Eigen::Index>(forecasts.size());
    require(truth.states.rows() == n || truth.states.rows() == n + 1, ErrorKind::argument,
            "spread_error_ratio: truth length must equal the number of forecasts (optionally plus v_0)");
    const Eigen::Index offset = truth.states.rows() - n;
    double spread = 0.0, error = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto [mean, cov] = forecast_moments(forecasts[static_cast<std::size_t>(j)]);
        spread += cov.trace();
        error += (truth.state(j + offset) - mean).squaredNorm();
    }
    require(error > 0.0, ErrorKind::domain, "spread_error_ratio: zero mean squared error");
    return spread / error;
}

Gaussian noisy_verification(const Gaussian& f, const Matrix& r) {
    require(r.rows() == f.dim() && r.cols() == f.dim(), ErrorKind::argument, "noisy_verification: dimension mismatch");
    return Gaussian{f.mean, symmetrize(f.cov + r)};
}

double crps_optimal_variance(double m, double v) { return (v - m) * (v - m) / std::numbers::ln2; }

double ds_optimal_variance(double m, double v) { return (v - m) * (v - m); }

}  // namespace dakit::scoring
