#pragma once

#include "dakit/autodiff.hpp"
#include "dakit/core.hpp"
#include "dakit/optimize.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dakit::learning {

// ---------------------------------------------------------------------------
// Parameter vectors

enum class BlockKind {
    free,          // entries stored as-is, column-major
    log_cholesky,  // SPD matrix L L^T; L lower triangular with exp() on the diagonal
};

struct ParamBlock {
    std::string name;
    BlockKind kind = BlockKind::free;
    Eigen::Index rows = 0, cols = 0;
    Eigen::Index offset = 0;

    Eigen::Index size() const;
};

// Names the sub-blocks of a flat parameter vector.
class ParamLayout {
public:
    ParamLayout& add(const std::string& name, BlockKind kind, Eigen::Index rows, Eigen::Index cols);

    Eigen::Index size() const noexcept { return size_; }
    const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }
    bool has(const std::string& name) const;
    const ParamBlock& at(const std::string& name) const;

    Matrix decode(const Vector& theta, const std::string& name) const;
    ad::Var decode(const std::vector<ad::Var>& theta, const std::string& name) const;
    // Writes the encoding of m into block `name` of theta.
    void encode(Vector& theta, const std::string& name, const Matrix& m) const;

private:
    std::vector<ParamBlock> blocks_;
    Eigen::Index size_ = 0;
};

struct ParamVector {
    Vector theta;
    ParamLayout layout;

    Matrix get(const std::string& name) const { return layout.decode(theta, name); }
};

// Log-Cholesky coordinates: the n(n+1)/2 lower-triangular entries of L in
// column-major order, with the diagonal stored as log L_ii.
Matrix log_cholesky_decode(const Vector& coords, Eigen::Index n);
Vector log_cholesky_encode(const Matrix& spd);
ad::Var log_cholesky_decode(const std::vector<ad::Var>& coords, Eigen::Index n);

// ---------------------------------------------------------------------------
// Smoothing distributions for linear models

// Law of the whole path V = (v_0, ..., v_J) given Y. `mean` holds one state
// per row; `cov` is over the row-major flattening (entry j*d + i is v_j(i)).
struct TrajectoryPosterior {
    Matrix mean;
    Matrix cov;
    Eigen::Index dim = 0;

    Matrix block(Eigen::Index j, Eigen::Index l) const { return cov.block(j * dim, l * dim, dim, dim); }
};

// Joint Gaussian of (V, Y) conditioned on Y, computed in covariance form so
// that singular model noise or prior covariance are allowed. Requires linear
// dynamics and observations and d(J+1) <= 2000.
TrajectoryPosterior smoothing_posterior(const StateSpaceModel& model, const ObservationSeries& obs);

struct SmootherSampleSet {
    std::vector<Trajectory> trajectories;
    // Set when the draws come from the ensemble smoother rather than the
    // exact conditional law.
    bool approximate = false;

    std::size_t size() const noexcept { return trajectories.size(); }
};

// M exact draws from P(V | Y); draw m uses stream ("smoother.sample", m).
SmootherSampleSet exact_smoother_samples(const StateSpaceModel& model, const ObservationSeries& obs,
                                         Eigen::Index samples, const RngStream& rng);

// Ensemble Kalman smoother: a perturbed-observation EnKF pass in which each
// analysis also updates every earlier state of each member's path. Exact only
// in the linear-Gaussian, infinite-ensemble limit.
SmootherSampleSet ensemble_smoother_samples(const StateSpaceModel& model, const ObservationSeries& obs,
                                            Eigen::Index members, const RngStream& rng);

// ---------------------------------------------------------------------------
// EM for the noise covariances

struct CovarianceUpdate {
    Matrix obs_noise;
    Matrix model_noise;
};

// Symmetrizes and lifts every eigenvalue to at least `floor`.
Matrix eigen_floor(const Matrix& sym, double floor = 1e-12);

// Sample averages over trajectories of (1/J) sum_j of the observation and
// model residual outer products.
CovarianceUpdate em_update_covariances(const StateSpaceModel& model, const ObservationSeries& obs,
                                       const SmootherSampleSet& samples);
// The same update with exact expectations under a Gaussian path law.
CovarianceUpdate em_update_covariances(const StateSpaceModel& model, const ObservationSeries& obs,
                                       const TrajectoryPosterior& posterior);

struct EmConfig {
    int iters = 30;
    // 0 uses exact expectations; otherwise the E-step draws this many exact
    // trajectories from stream ("em", iteration).
    Eigen::Index samples = 0;
    RngStream rng;
    bool update_model_noise = true;
    bool update_obs_noise = true;
};

struct EmTrace {
    std::vector<Matrix> model_noise;  // iterate 0 is the starting value
    std::vector<Matrix> obs_noise;
    std::vector<double> loglik;       // kf_loglik at each iterate
};

EmTrace em_run(const StateSpaceModel& model, const ObservationSeries& obs, const EmConfig& cfg);

// ---------------------------------------------------------------------------
// Kalman-filter marginal likelihood

// log P(Y | model) from the Kalman recursion (linearized dynamics when the
// dynamics are nonlinear), including the -(Jk/2) log 2 pi constant. The
// observation map must be linear.
double kf_loglik(const StateSpaceModel& model, const ObservationSeries& obs);

// Model matrices living on an autodiff tape.
struct LinearGaussianVars {
    ad::Var dynamics, obs, model_noise, obs_noise, init_mean, init_cov;
};

ad::Var kf_loglik(const LinearGaussianVars& m, const ObservationSeries& obs);

// A linear-Gaussian model whose blocks named "dynamics", "obs",
// "model_noise", "obs_noise", "init_mean" or "init_cov" are taken from the
// parameter vector; anything the layout does not name is fixed from `base`.
struct KfFamily {
    StateSpaceModel base;
    ParamLayout layout;

    void validate() const;
    StateSpaceModel model(const Vector& theta) const;
    LinearGaussianVars vars(const std::vector<ad::Var>& theta) const;
    // Parameter vector reproducing `m` (e.g. a starting guess).
    Vector encode(const StateSpaceModel& m) const;
};

ad::Program kf_loglik_program(const KfFamily& family, const ObservationSeries& obs);

struct MleConfig {
    int steps = 100;
    optimize::StepRule step = optimize::StepRule::armijo(1.0);
    double gradient_tol = 1e-8;
};

struct MleResult {
    ParamVector estimate;
    optimize::Trace trace;  // values hold kf_loglik (not its negative)
};

// Gradient ascent on theta -> kf_loglik with reverse-mode gradients through
// the whole recursion.
MleResult fit_mle_autodiff_kf(const KfFamily& family, const ObservationSeries& obs, const Vector& theta0,
                              const MleConfig& cfg = {});

// ---------------------------------------------------------------------------
// Monte Carlo EM over parameterized dynamics

// Dynamics v -> Psi(theta, v) known up to a parameter vector.
struct DynamicsFamily {
    Eigen::Index params = 0;
    std::function<Vector(const Vector& theta, const Vector& v)> map;
    std::function<ad::Var(const ad::Var& theta, const ad::Var& v)> tape_map;
    // Matrix of the map when it is linear in v for this theta.
    std::function<std::optional<Matrix>(const Vector& theta)> matrix;
};

// `base` with its dynamics and model noise replaced.
StateSpaceModel instantiate(const StateSpaceModel& base, const DynamicsFamily& family, const Vector& theta,
                            const Matrix& model_noise);

// Profile objective of the M-step: with Sigma(theta) the average model
// residual outer product over all samples and transitions, returns
// -(J/2) log det Sigma(theta). The Sigma-weighted quadratic term is constant
// at the plug-in Sigma and is dropped.
ad::Var mcem_objective(const DynamicsFamily& family, const SmootherSampleSet& samples, const ad::Var& theta);
double mcem_objective(const DynamicsFamily& family, const SmootherSampleSet& samples, const Vector& theta);
Matrix mcem_model_noise(const DynamicsFamily& family, const SmootherSampleSet& samples, const Vector& theta);

struct McEmConfig {
    int outer = 20;
    int inner = 5;
    Eigen::Index samples = 20;
    optimize::StepRule step = optimize::StepRule::armijo(1.0);
    RngStream rng;
};

struct McEmTrace {
    std::vector<Vector> theta;             // iterate 0 is the starting value
    std::vector<Matrix> model_noise;
    std::vector<std::vector<double>> inner_objective;  // per outer iteration
    bool approximate_e_step = false;
    bool aborted = false;
    std::string message;
};

McEmTrace mc_em_run(const StateSpaceModel& base, const DynamicsFamily& family, const ObservationSeries& obs,
                    const Vector& theta0, const Matrix& model_noise0, const McEmConfig& cfg);

// ---------------------------------------------------------------------------
// Model-error correction from analysis increments

struct FeatureBasis {
    Eigen::Index count = 0;
    std::function<Vector(const Vector&)> eval;
};

FeatureBasis linear_features(Eigen::Index dim);
// (1, v_1, ..., v_d)
FeatureBasis affine_features(Eigen::Index dim);
// (1, v, and all degree-two monomials v_i v_j with i <= j)
FeatureBasis quadratic_features(Eigen::Index dim);

struct IncrementPair {
    Vector state;      // v_j
    Vector increment;  // v_{j+1} - Psi_approx(v_j)
};

std::vector<IncrementPair> increment_pairs(const Trajectory& path, const VectorMap& approx_dynamics);

struct IncrementCorrection {
    Matrix weights;  // d x p
    FeatureBasis basis;

    Vector operator()(const Vector& v) const { return weights * basis.eval(v); }
};

// Ridge least squares for the map v_j -> increment in the span of the
// features.
IncrementCorrection learn_increment_correction(const std::vector<IncrementPair>& pairs, const FeatureBasis& basis,
                                               double ridge);

VectorMap corrected_dynamics(const VectorMap& approx_dynamics, const IncrementCorrection& correction);

// ---------------------------------------------------------------------------
// Fixed-gain learning

// (1/(J+1)) sum_{j=0}^{J} Tr C_j(K) for the fixed-gain covariance recursion
// started at C_0.
double fixed_gain_objective(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                            const Matrix& c0, const Matrix& gain, Eigen::Index steps);
ad::Var fixed_gain_objective(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                             const Matrix& c0, const ad::Var& gain, Eigen::Index steps);

struct GainConfig {
    int iters = 500;
    optimize::StepRule step = optimize::StepRule::armijo(1.0);
    double gradient_tol = 1e-12;
    std::optional<Matrix> initial_gain;  // zero when unset
};

struct GainResult {
    Matrix gain;
    double objective = 0.0;
    optimize::Trace trace;
    // Trial gains whose closed loop (I - K H) A had spectral radius >= 1; the
    // objective there is +infinity.
    int divergent_trials = 0;
};

GainResult learn_fixed_gain(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                            const Matrix& c0, Eigen::Index steps, const GainConfig& cfg = {});

}  // namespace dakit::learning
