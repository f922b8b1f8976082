#pragma once

#include "dakit/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dakit::multifidelity {

// A forward model of some fidelity together with what one evaluation costs.
struct FidelityModel {
    std::string name;
    VectorMap map;
    double cost = 1.0;
    // Maps the full state to this model's reduced state (multi-model filters).
    std::optional<Matrix> projection;

    void validate() const;
};

// Standard deviations of the high-fidelity output and of each low-fidelity
// output, and the correlation of each low-fidelity output with the
// high-fidelity one.
struct FidelityStats {
    double sigma_hi = 1.0;
    Vector sigma;  // L
    Vector rho;    // L

    Eigen::Index models() const { return sigma.size(); }
    void validate() const;
};

// Sample sizes N_hi <= N_1 <= ... <= N_L (index 0 is the high-fidelity
// model) and one control-variate weight per low-fidelity model.
struct MfmcPlan {
    std::vector<Eigen::Index> sizes;
    Vector weights;
    // Estimator variance predicted from the statistics the plan was built with.
    double variance = 0.0;
    // Whether an allocation came from exhaustive search rather than the
    // relaxed problem.
    bool enumerated = false;

    Eigen::Index models() const { return static_cast<Eigen::Index>(sizes.size()) - 1; }
    void validate() const;
};

// ---------------------------------------------------------------------------
// Combining unbiased estimates

// An estimate of G x with error covariance `cov`.
struct ProjectedEstimate {
    Vector value;
    Matrix projection;
    Matrix cov;
};

// Minimum-variance linear unbiased combination of independent estimates.
// Throws a rank error when sum G^T C^{-1} G is singular.
Gaussian blue_combine(const std::vector<ProjectedEstimate>& estimates);

struct MultiModelAnalysis {
    Gaussian analysis;
    // G_l v and G_l C G_l^T for every model.
    std::vector<Gaussian> per_model;
};

// Analysis step of the multi-model Kalman filter: each forecast is a
// ProjectedEstimate of the state (mean, covariance, projection).
MultiModelAnalysis mmkf_analysis(const std::vector<ProjectedEstimate>& forecasts, const Matrix& h,
                                 const Matrix& obs_noise, const Vector& y);

// ---------------------------------------------------------------------------
// Multifidelity Monte Carlo

// Control-variate weights rho_l sigma_hi / sigma_l.
Vector mfmc_weights(const FidelityStats& stats);

// Variance of the estimator for the given sizes and weights.
double mfmc_variance(const FidelityStats& stats, const std::vector<Eigen::Index>& sizes, const Vector& weights);

struct MfmcEstimate {
    Vector mean;
    // Per-coordinate variance of `mean`, from statistics estimated on the
    // first N_hi draws where every model was evaluated. Infinite when
    // N_hi < 2.
    Vector variance;
    std::vector<FidelityStats> stats;  // one per output coordinate
};

// Evaluations on shared inputs: hi holds N_hi rows, lows[l] holds N_{l+1}
// rows, and row n of every matrix belongs to input draw n. Weights are
// L x q (one per model and output coordinate).
MfmcEstimate mfmc_combine(const Matrix& hi, const std::vector<Matrix>& lows, const Matrix& weights);

// Per-coordinate statistics of the first `pairs` rows of each evaluation
// matrix. With fewer than 10 pairs each correlation is shrunk toward zero by
// the factor pairs / 10. Constant outputs get sigma 0 and correlation 0.
std::vector<FidelityStats> estimate_stats(const Matrix& hi, const std::vector<Matrix>& lows, Eigen::Index pairs);

// Evaluates the models on the leading rows of `inputs` (N_L x d draws) and
// combines them with the plan's weights, used for every output coordinate.
MfmcEstimate mfmc_mean(const VectorMap& hi, const std::vector<FidelityModel>& lows, const MfmcPlan& plan,
                       const Matrix& inputs);

enum class AllocationMethod { automatic, enumerate, relax };

// Sample sizes minimizing the variance with optimal weights subject to
// sum_l c_l N_l <= budget and N_0 <= N_1 <= ... <= N_L. costs[0] is the
// high-fidelity cost. `automatic` enumerates when the feasible lattice has
// at most 10^6 points and otherwise rounds the continuous optimum.
MfmcPlan mosap_allocate(const std::vector<double>& costs, const FidelityStats& stats, double budget,
                        AllocationMethod method = AllocationMethod::automatic);

// ---------------------------------------------------------------------------
// Ensemble filter on multifidelity forecasts

enum class CovarianceSource {
    high_fidelity,  // sample covariance of the high-fidelity forecasts
    combined,       // mf_cov_combine of the sample covariances of every model
};

struct MfEnkfConfig {
    RngStream rng;
    // Added to the forecast covariance to account for model noise.
    std::optional<Matrix> model_noise;
    CovarianceSource covariance = CovarianceSource::high_fidelity;
};

struct MfEnkfStep {
    Gaussian forecast;  // after the mean-variance correction
    Gaussian analysis;
    Matrix weights;     // L x d weights used for the mean
    Vector mean_variance;
};

// One cycle: draw N_L states from `state` with gaussian_sample on stream
// ("mfenkf", step), run model l on the first N_l of them (models[0] is the
// high-fidelity model), estimate the forecast mean by MFMC with weights
// re-estimated per coordinate, add its variance to the diagonal of the
// forecast covariance and assimilate y.
MfEnkfStep mf_enkf_step(const Gaussian& state, const std::vector<FidelityModel>& models,
                        const std::vector<Eigen::Index>& sizes, const Matrix& h, const Matrix& obs_noise,
                        const Vector& y, const MfEnkfConfig& cfg, std::uint64_t step = 0);

// ---------------------------------------------------------------------------
// Covariance combination

struct CovarianceEstimate {
    Matrix cov;
    double expected_error = 1.0;  // E |C_l - C|_F^2
};

struct CovarianceCombination {
    Vector weights;
    Matrix combined;
    double total_variance = 0.0;
};

// Inverse-error weights for unbiased covariance estimators.
CovarianceCombination mf_cov_combine(const std::vector<CovarianceEstimate>& estimates);

}  // namespace dakit::multifidelity
