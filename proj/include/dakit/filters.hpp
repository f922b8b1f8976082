#pragma once

#include "dakit/core.hpp"

#include <optional>
#include <vector>

namespace dakit::filters {

// One predict/analyse cycle of a Gaussian filter.
struct KalmanState {
    Gaussian analysis;
    Gaussian forecast;
    Matrix gain;
};

// Solves gain * innovation = cross for the gain, i.e. cross * innovation^{-1}.
// Cholesky first; on failure the diagonal is shifted by 1e-10 * trace / k and
// the factorization retried once before a numeric error is raised.
Matrix innovation_gain(const Matrix& cross, const Matrix& innovation, const char* what);

// Analysis of a Gaussian forecast against y = H v + eta.
KalmanState kalman_analysis(const Gaussian& forecast, const Matrix& h, const Matrix& obs_noise, const Vector& y);

KalmanState kalman_step(const Gaussian& state, const Matrix& a, const Matrix& h, const Matrix& model_noise,
                        const Matrix& obs_noise, const Vector& y);

struct SteadyState {
    Matrix forecast_cov;
    Matrix gain;
    Matrix analysis_cov;
    int iterations = 0;
    double residual = 0.0;  // Frobenius norm of the fixed-point residual
};

// Frobenius norm of C - (A (I - K H) C A^T + Sigma) with K the gain induced
// by the forecast covariance C.
double riccati_residual(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                        const Matrix& forecast_cov);

// Iterates the covariance recursion from a zero analysis covariance until the
// relative change of the forecast covariance falls below tol.
SteadyState steady_state_gain(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                              double tol = 1e-13, int max_iter = 100000);

// Fixed-gain update. With `stochastic` set the forecast is perturbed by a
// draw of the model noise taken from `rng`.
Vector threedvar_step(const Vector& v, const StateSpaceModel& model, const Matrix& gain, const Vector& y,
                      bool stochastic, RngStream& rng);

// Linearized Kalman step. Jacobians default to those of the model.
KalmanState exkf_step(const KalmanState& state, const StateSpaceModel& model, const Vector& y,
                      const JacobianMap& jac_dyn = {}, const JacobianMap& jac_obs = {});

struct Localization {
    Matrix distance;  // d x d, state-to-state
    double length = 1.0;
    // Needed only for nonlinear observation maps: state-to-observation (d x k)
    // and observation-to-observation (k x k) distances.
    std::optional<Matrix> state_obs_distance;
    std::optional<Matrix> obs_obs_distance;
};

struct EnKFConfig {
    double inflation = 1.0;
    std::optional<Localization> localization;
    RngStream rng;
    // Adds model noise in the forecast. Disabling it is sometimes paired with
    // inflation to stand in for an unknown model noise.
    bool model_noise = true;

    void validate(Eigen::Index dim_state, Eigen::Index dim_obs, bool linear_obs) const;
};

Ensemble inflate(const Ensemble& e, double alpha);

// Schur product of C with exp(-D_ik^2 / ell).
Matrix localize_cov(const Matrix& c, const Matrix& distance, double ell);

// Perturbed-observation EnKF. `step` selects the random streams so that a run
// is reproducible member by member regardless of threading.
Ensemble enkf_step(const Ensemble& e, const StateSpaceModel& model, const Vector& y, const EnKFConfig& cfg,
                   std::uint64_t step = 0);

enum class ResampleScheme { multinomial, systematic };

Ensemble resample(const WeightedEnsemble& w, ResampleScheme scheme, RngStream& rng);

// Extra output of a particle step.
struct ParticleStepInfo {
    bool resampled = false;
    double ess_before = 0.0;
    Vector log_likelihood;  // unnormalized log weight increment per member
};

struct ParticleConfig {
    RngStream rng;
    double resample_threshold = 0.5;  // resample when ESS < threshold * N
    ResampleScheme scheme = ResampleScheme::systematic;
};

WeightedEnsemble bpf_step(const WeightedEnsemble& w, const StateSpaceModel& model, const Vector& y,
                          const ParticleConfig& cfg, std::uint64_t step = 0, ParticleStepInfo* info = nullptr);

// Optimal-proposal particle filter for a linear observation map. Requires a
// positive definite model noise.
WeightedEnsemble opf_step(const WeightedEnsemble& w, const StateSpaceModel& model, const Vector& y,
                          const ParticleConfig& cfg, std::uint64_t step = 0, ParticleStepInfo* info = nullptr);

// Per-step summary of a filter run over y_1..y_J.
struct FilterTrace {
    Matrix mean;    // J x d analysis means
    Vector spread;  // trace of the analysis covariance
    Vector ess;     // effective sample size, NaN for non-particle filters
};

FilterTrace kalman_run(const StateSpaceModel& model, const ObservationSeries& obs);
FilterTrace threedvar_run(const StateSpaceModel& model, const ObservationSeries& obs, const Matrix& gain,
                          bool stochastic, const RngStream& rng);
FilterTrace exkf_run(const StateSpaceModel& model, const ObservationSeries& obs);
FilterTrace enkf_run(const StateSpaceModel& model, const ObservationSeries& obs, Eigen::Index members,
                     const EnKFConfig& cfg);
FilterTrace bpf_run(const StateSpaceModel& model, const ObservationSeries& obs, Eigen::Index members,
                    const ParticleConfig& cfg);
FilterTrace opf_run(const StateSpaceModel& model, const ObservationSeries& obs, Eigen::Index members,
                    const ParticleConfig& cfg);

}  // namespace dakit::filters
