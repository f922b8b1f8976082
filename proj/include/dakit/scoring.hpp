#pragma once

#include "dakit/core.hpp"

#include <string>
#include <variant>
#include <vector>

namespace dakit::scoring {

using Forecast = std::variant<Gaussian, Ensemble, WeightedEnsemble>;

struct ScoreReport {
    std::string rule;
    std::vector<double> scores;
    double mean = 0.0;

    static ScoreReport from_scores(std::string rule, std::vector<double> scores);
    std::string to_json() const;
};

// Ensemble energy score. With `fair` the pairwise term is
// (1/(2N(N-1))) sum_{i != j} |u_i - u_j|^beta; otherwise 1/(2N^2) sum_{i,j}.
double energy_score(const Ensemble& f, const Vector& v, double beta = 1.0, bool fair = true);
double crps_ensemble(const Ensemble& f, double v, bool fair = true);
double crps_gaussian(double m, double sigma, double v);

// Forecast alpha-quantile: closed form for a Gaussian, type-7 interpolation
// of order statistics for an ensemble.
double forecast_quantile(const Forecast& f, double alpha);
double quantile_score(const Forecast& f, double alpha, double v);

double log_score(const Gaussian& f, const Vector& v);
double dawid_sebastiani(const Vector& m, const Matrix& c, const Vector& v);

// Mean forecast variance (trace of the covariance) divided by mean squared
// error of the forecast mean. When `truth` has one more row than there are
// forecasts, row 0 (the initial state) is skipped.
double spread_error_ratio(const std::vector<Forecast>& forecasts, const Trajectory& truth);

// Forecast law seen through additive N(0, r) verification noise.
Gaussian noisy_verification(const Gaussian& f, const Matrix& r);

// Variance minimizing the expected score of a scalar Gaussian forecast with
// mean m at verification v. For the CRPS the stationarity condition
// 2 phi(z) = 1/sqrt(pi) gives z^2 = ln 2, i.e. C* = (v - m)^2 / ln 2.
double crps_optimal_variance(double m, double v);
double ds_optimal_variance(double m, double v);

std::pair<Vector, Matrix> forecast_moments(const Forecast& f);

double normal_cdf(double z);
double normal_pdf(double z);
double normal_quantile(double p);

}  // namespace dakit::scoring
