#include "dakit/core.hpp"

#include "dakit/error.hpp"

#include <array>
#include <cmath>
#include <sstream>

namespace dakit {

void Gaussian::validate(const char* what) const {
    const std::string w(what);
    require(cov.rows() == mean.size() && cov.cols() == mean.size(), ErrorKind::argument,
            w + ": covariance shape does not match mean");
    require(mean.allFinite() && cov.allFinite(), ErrorKind::argument, w + ": non-finite entries");
    require(is_symmetric(cov, 1e-12), ErrorKind::argument, w + ": covariance is not symmetric");
    if (cov.size() > 0) {
        const double floor = -1e-10 * std::abs(cov.trace());
        require(min_eigenvalue_sym(symmetrize(cov)) >= floor, ErrorKind::argument,
                w + ": covariance is not positive semidefinite");
    }
}

void StateSpaceModel::validate() const {
    require(dim_state > 0 && dim_obs > 0, ErrorKind::configuration, "model: dimensions must be positive");
    require(static_cast<bool>(dynamics), ErrorKind::configuration, "model: dynamics map missing");
    require(static_cast<bool>(obs_map), ErrorKind::configuration, "model: observation map missing");
    require(model_noise.rows() == dim_state && model_noise.cols() == dim_state, ErrorKind::configuration,
            "model: model noise must be d x d");
    require(obs_noise.rows() == dim_obs && obs_noise.cols() == dim_obs, ErrorKind::configuration,
            "model: observation noise must be k x k");
    require(init.mean.size() == dim_state, ErrorKind::configuration, "model: initial mean must have length d");
    try {
        init.validate("model initial condition");
        Gaussian{Vector::Zero(dim_state), model_noise}.validate("model noise");
    } catch (const Error& e) {
        fail(ErrorKind::configuration, e.what());
    }
    Eigen::LLT<Matrix> llt(obs_noise);
    require(llt.info() == Eigen::Success && is_symmetric(obs_noise), ErrorKind::configuration,
            "model: observation noise is not positive definite");
    if (dynamics_matrix)
        require(dynamics_matrix->rows() == dim_state && dynamics_matrix->cols() == dim_state,
                ErrorKind::configuration, "model: dynamics matrix must be d x d");
    if (obs_matrix) {
        require(obs_matrix->rows() == dim_obs && obs_matrix->cols() == dim_state, ErrorKind::configuration,
                "model: observation matrix must be k x d");
        // Deterministic probes: the check must not depend on any global RNG.
        RngStream probe(0x5eed, 0);
        for (int i = 0; i < 3; ++i) {
            const Vector v = probe.normal_vector(dim_state);
            const Vector diff = obs_map(v) - (*obs_matrix) * v;
            require(diff.cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + v.cwiseAbs().maxCoeff()),
                    ErrorKind::configuration, "model: observation map disagrees with observation matrix");
        }
    }
}

namespace {

Matrix tape_jacobian(const TapeMap& f, const Vector& v) {
    ad::Tape t = ad::record(
        [&](ad::Tape&, const std::vector<ad::Var>& in) { return std::vector<ad::Var>{f(ad::vcat(in))}; }, v);
    return ad::reverse_jacobian(t, v);
}

}  // namespace

Matrix StateSpaceModel::jacobian_dynamics(const Vector& v) const {
    if (dynamics_matrix) return *dynamics_matrix;
    if (dynamics_jacobian) return dynamics_jacobian(v);
    if (dynamics_tape) return tape_jacobian(dynamics_tape, v);
    fail(ErrorKind::precondition, "dynamics Jacobian unavailable: no matrix, Jacobian or tape form");
}

Matrix StateSpaceModel::jacobian_obs(const Vector& v) const {
    if (obs_matrix) return *obs_matrix;
    if (obs_jacobian) return obs_jacobian(v);
    if (obs_tape) return tape_jacobian(obs_tape, v);
    fail(ErrorKind::precondition, "observation Jacobian unavailable: no matrix, Jacobian or tape form");
}

StateSpaceModel make_linear_model(const Matrix& a, const Matrix& h, const Matrix& model_noise,
                                  const Matrix& obs_noise, const Gaussian& init) {
    StateSpaceModel m;
    m.dim_state = a.rows();
    m.dim_obs = h.rows();
    m.dynamics = [a](const Vector& v) -> Vector { return a * v; };
    m.dynamics_matrix = a;
    m.dynamics_tape = [a](const ad::Var& v) { return ad::matvec(ad::constant_like(v, a), v); };
    m.model_noise = model_noise;
    m.obs_map = [h](const Vector& v) -> Vector { return h * v; };
    m.obs_matrix = h;
    m.obs_tape = [h](const ad::Var& v) { return ad::matvec(ad::constant_like(v, h), v); };
    m.obs_noise = obs_noise;
    m.init = init;
    return m;
}

StateSpaceModel make_scalar_model(double a, double h, double model_var, double obs_var, double m0, double c0) {
    return make_linear_model(Matrix::Constant(1, 1, a), Matrix::Constant(1, 1, h),
                             Matrix::Constant(1, 1, model_var), Matrix::Constant(1, 1, obs_var),
                             Gaussian{Vector::Constant(1, m0), Matrix::Constant(1, 1, c0)});
}

namespace {

template <class T>
std::array<T, 3> lorenz_rhs(const std::array<T, 3>& v, const Lorenz63Params& p) {
    return {p.sigma * (v[1] - v[0]), v[0] * (p.rho - v[2]) - v[1], v[0] * v[1] - p.beta * v[2]};
}

template <class T>
std::array<T, 3> axpy(const std::array<T, 3>& x, double a, const std::array<T, 3>& k) {
    return {x[0] + a * k[0], x[1] + a * k[1], x[2] + a * k[2]};
}

template <class T>
std::array<T, 3> rk4_step(const std::array<T, 3>& v, double dt, const Lorenz63Params& p) {
    const auto k1 = lorenz_rhs(v, p);
    const auto k2 = lorenz_rhs(axpy(v, 0.5 * dt, k1), p);
    const auto k3 = lorenz_rhs(axpy(v, 0.5 * dt, k2), p);
    const auto k4 = lorenz_rhs(axpy(v, dt, k3), p);
    std::array<T, 3> out = v;
    for (int i = 0; i < 3; ++i) out[i] = v[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    return out;
}

long step_count(double tau, double dt) {
    require(dt > 0.0, ErrorKind::argument, "lorenz63: dt must be positive");
    require(tau >= 0.0, ErrorKind::argument, "lorenz63: tau must be nonnegative");
    const double ratio = tau / dt;
    const double n = std::round(ratio);
    require(std::abs(ratio - n) <= 1e-9 * std::max(1.0, n), ErrorKind::argument,
            "lorenz63: tau must be an integer multiple of dt");
    return static_cast<long>(n);
}

}  // namespace

Vector lorenz63_flow(const Vector& v, double tau, double dt, const Lorenz63Params& p) {
    require(v.size() == 3, ErrorKind::argument, "lorenz63: state must have length 3");
    const long n = step_count(tau, dt);
    std::array<double, 3> s = {v(0), v(1), v(2)};
    for (long i = 0; i < n; ++i) s = rk4_step(s, dt, p);
    return Vector{{s[0], s[1], s[2]}};
}

ad::Var lorenz63_flow(const ad::Var& v, double tau, double dt, const Lorenz63Params& p) {
    require(v.rows() == 3 && v.cols() == 1, ErrorKind::argument, "lorenz63: state must have length 3");
    const long n = step_count(tau, dt);
    if (n == 0) return v;
    std::array<ad::Var, 3> s = {ad::element(v, 0), ad::element(v, 1), ad::element(v, 2)};
    for (long i = 0; i < n; ++i) s = rk4_step(s, dt, p);
    return ad::vcat({s[0], s[1], s[2]});
}

StateSpaceModel make_lorenz63_model(const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                                    const Gaussian& init, double tau, double dt) {
    step_count(tau, dt);
    StateSpaceModel m;
    m.dim_state = 3;
    m.dim_obs = h.rows();
    m.dynamics = [tau, dt](const Vector& v) { return lorenz63_flow(v, tau, dt); };
    m.dynamics_tape = [tau, dt](const ad::Var& v) { return lorenz63_flow(v, tau, dt); };
    m.model_noise = model_noise;
    m.obs_map = [h](const Vector& v) -> Vector { return h * v; };
    m.obs_matrix = h;
    m.obs_tape = [h](const ad::Var& v) { return ad::matvec(ad::constant_like(v, h), v); };
    m.obs_noise = obs_noise;
    m.init = init;
    return m;
}

double WeightedEnsemble::ess() const { return 1.0 / weights.squaredNorm(); }

void WeightedEnsemble::validate() const {
    require(members.rows() >= 1 && weights.size() == members.rows(), ErrorKind::argument,
            "weighted ensemble: weight count must match member count");
    require((weights.array() >= 0.0).all(), ErrorKind::argument, "weighted ensemble: negative weight");
    require(std::abs(weights.sum() - 1.0) <= 1e-12, ErrorKind::argument,
            "weighted ensemble: weights do not sum to one");
}

std::pair<Trajectory, ObservationSeries> simulate(const StateSpaceModel& model, Eigen::Index steps,
                                                  const RngStream& rng) {
    require(steps >= 1, ErrorKind::argument, "simulate: J must be at least 1");
    // A zero observation-noise matrix is accepted as noise-free observation;
    // anything else must factor as a positive definite matrix.
    const bool noiseless_obs = model.obs_noise.size() > 0 && model.obs_noise.isZero(0.0);
    if (!noiseless_obs) model.validate();
    const Matrix init_factor = psd_factor(model.init.cov);
    const Matrix model_factor = psd_factor(model.model_noise);
    const Matrix obs_factor = noiseless_obs ? model.obs_noise : cholesky_lower(model.obs_noise, "simulate");
    const Eigen::Index d = model.dim_state, k = model.dim_obs;

    Trajectory traj{Matrix(steps + 1, d)};
    ObservationSeries obs{Matrix(steps, k)};
    RngStream init_rng = rng.derive("simulate.init");
    Vector v = model.init.mean + init_factor * init_rng.normal_vector(d);
    traj.states.row(0) = v.transpose();
    for (Eigen::Index j = 0; j < steps; ++j) {
        RngStream xi = rng.derive("simulate.model", static_cast<std::uint64_t>(j));
        RngStream eta = rng.derive("simulate.obs", static_cast<std::uint64_t>(j));
        v = model.dynamics(v) + model_factor * xi.normal_vector(d);
        traj.states.row(j + 1) = v.transpose();
        obs.obs.row(j) = (model.obs_map(v) + obs_factor * eta.normal_vector(k)).transpose();
    }
    return {std::move(traj), std::move(obs)};
}

std::pair<Vector, Matrix> ensemble_moments(const Ensemble& e, bool unbiased) {
    const Eigen::Index n = e.size();
    require(n >= 1, ErrorKind::argument, "ensemble_moments: empty ensemble");
    require(!unbiased || n >= 2, ErrorKind::argument, "ensemble_moments: unbiased covariance needs N >= 2");
    const Vector mean = e.members.colwise().mean().transpose();
    const Matrix centered = e.members.rowwise() - mean.transpose();
    const double denom = unbiased ? static_cast<double>(n - 1) : static_cast<double>(n);
    Matrix cov = (centered.transpose() * centered) / denom;
    return {mean, symmetrize(cov)};
}

std::pair<Vector, Matrix> weighted_moments(const WeightedEnsemble& e) {
    const Vector mean = e.members.transpose() * e.weights;
    const Matrix centered = e.members.rowwise() - mean.transpose();
    const Matrix cov = centered.transpose() * e.weights.asDiagonal() * centered;
    return {mean, symmetrize(cov)};
}

Gaussian gaussian_posterior_linear(const Gaussian& prior, const Matrix& obs_op, const Matrix& noise,
                                   const Vector& y) {
    const Eigen::Index d = prior.dim();
    require(obs_op.cols() == d && obs_op.rows() == y.size() && noise.rows() == y.size() &&
                noise.cols() == y.size(),
            ErrorKind::argument, "gaussian_posterior_linear: shape mismatch");
    const Matrix prior_prec = spd_inverse(prior.cov, "gaussian_posterior_linear: prior covariance");
    const Matrix noise_inv_l = spd_solve(noise, obs_op, "gaussian_posterior_linear: noise covariance");
    const Matrix prec = symmetrize(prior_prec + obs_op.transpose() * noise_inv_l);
    const Vector rhs = noise_inv_l.transpose() * y + prior_prec * prior.mean;

    Eigen::LLT<Matrix> llt(prec);
    const double cond = condition_number_sym(prec);
    if (llt.info() != Eigen::Success || !(cond < 1e14)) {
        std::ostringstream os;
        os << "gaussian_posterior_linear: posterior precision is singular or ill-conditioned (condition number "
           << cond << ")";
        fail(ErrorKind::numeric, os.str());
    }
    Gaussian post;
    post.cov = symmetrize(llt.solve(Matrix::Identity(d, d)));
    post.mean = llt.solve(rhs);
    return post;
}

Ensemble gaussian_sample(const Gaussian& g, Eigen::Index n, const RngStream& rng) {
    require(n >= 1, ErrorKind::argument, "gaussian_sample: n must be at least 1");
    const Matrix factor = psd_factor(g.cov);
    const Eigen::Index d = g.dim();
    Ensemble e{Matrix(n, d)};
    for (Eigen::Index i = 0; i < n; ++i) {
        RngStream s = rng.derive("gaussian_sample", static_cast<std::uint64_t>(i));
        e.members.row(i) = (g.mean + factor * s.normal_vector(d)).transpose();
    }
    return e;
}

}  // namespace dakit
