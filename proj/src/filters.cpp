#include "dakit/filters.hpp"

#include "dakit/error.hpp"
#include "dakit/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace dakit::filters {

namespace {

void check_shapes(Eigen::Index d, Eigen::Index k, const Matrix& a, const Matrix& h, const Matrix& model_noise,
                  const Matrix& obs_noise, const char* what) {
    const bool ok = a.rows() == d && a.cols() == d && h.rows() == k && h.cols() == d && model_noise.rows() == d &&
                    model_noise.cols() == d && obs_noise.rows() == k && obs_noise.cols() == k;
    require(ok, ErrorKind::argument, std::string(what) + ": shape mismatch");
}

// Applies the observation map to every member (rows of `states`).
Matrix observe_members(const StateSpaceModel& model, const Matrix& states) {
    if (model.obs_matrix) return states * model.obs_matrix->transpose();
    Matrix out(states.rows(), model.dim_obs);
    parallel_for(static_cast<std::size_t>(states.rows()), [&](std::size_t n) {
        const auto i = static_cast<Eigen::Index>(n);
        out.row(i) = model.obs_map(states.row(i).transpose()).transpose();
    });
    return out;
}

Matrix propagate_members(const StateSpaceModel& model, const Matrix& states) {
    if (model.dynamics_matrix) return states * model.dynamics_matrix->transpose();
    Matrix out(states.rows(), states.cols());
    parallel_for(static_cast<std::size_t>(states.rows()), [&](std::size_t n) {
        const auto i = static_cast<Eigen::Index>(n);
        out.row(i) = model.dynamics(states.row(i).transpose()).transpose();
    });
    return out;
}

// Adds factor * z_n to row n, where z_n is a standard normal vector from the
// stream (tag, step, n).
void add_noise(Matrix& states, const Matrix& factor, const RngStream& rng, const char* tag, std::uint64_t step) {
    const Eigen::Index dim = factor.cols();
    parallel_for(static_cast<std::size_t>(states.rows()), [&](std::size_t n) {
        RngStream s = rng.derive(tag, step, n);
        states.row(static_cast<Eigen::Index>(n)) += (factor * s.normal_vector(dim)).transpose();
    });
}

Matrix cross_cov(const Matrix& a, const Matrix& b) {
    const Matrix ca = a.rowwise() - a.colwise().mean();
    const Matrix cb = b.rowwise() - b.colwise().mean();
    return ca.transpose() * cb / static_cast<double>(a.rows());
}

// Scalar exp keeps the far-field entries exactly zero; the vectorized
// version returns denormal values for very negative arguments.
Matrix taper(const Matrix& distance, double ell) {
    return distance.unaryExpr([ell](double dist) { return std::exp(-dist * dist / ell); });
}

// Normalizes log weights with max subtraction.
Vector normalize_log_weights(const Vector& logw, const char* what) {
    const double top = logw.maxCoeff();
    if (!std::isfinite(top)) {
        fail(ErrorKind::degenerate, std::string(what) + ": every particle weight is zero");
    }
    Vector w = (logw.array() - top).exp().matrix();
    return w / w.sum();
}

// Resamples when the effective sample size is below threshold * N.
WeightedEnsemble maybe_resample(const WeightedEnsemble& w, const ParticleConfig& cfg, std::uint64_t step,
                                const char* tag, ParticleStepInfo* info) {
    const double ess = w.ess();
    const double n = static_cast<double>(w.size());
    if (info) {
        info->ess_before = ess;
        info->resampled = false;
    }
    if (!(ess < cfg.resample_threshold * n)) return w;
    RngStream rs = cfg.rng.derive(tag, step);
    Ensemble e = resample(w, cfg.scheme, rs);
    if (info) info->resampled = true;
    return WeightedEnsemble{std::move(e.members), Vector::Constant(w.size(), 1.0 / n)};
}

// Squared norms |r_n|^2_S for the rows of r.
Vector weighted_sq_norms(const Matrix& residuals, const Matrix& spd, const char* what) {
    const Matrix l = cholesky_lower(spd, what);
    const Matrix z = l.triangularView<Eigen::Lower>().solve(residuals.transpose());
    return z.colwise().squaredNorm().transpose();
}

Gaussian ensemble_gaussian(const Matrix& members) {
    auto [m, c] = ensemble_moments(Ensemble{members});
    return Gaussian{std::move(m), std::move(c)};
}

FilterTrace make_trace(Eigen::Index steps, Eigen::Index d) {
    FilterTrace t;
    t.mean = Matrix(steps, d);
    t.spread = Vector(steps);
    t.ess = Vector::Constant(steps, std::numeric_limits<double>::quiet_NaN());
    return t;
}

void check_obs(const StateSpaceModel& model, const ObservationSeries& obs) {
    require(obs.steps() >= 1 && obs.obs.cols() == model.dim_obs, ErrorKind::argument,
            "filter: observation series does not match the model");
}

}  // namespace

Matrix innovation_gain(const Matrix& cross, const Matrix& innovation, const char* what) {
    const Matrix s = symmetrize(innovation);
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success) {
        const double jitter = 1e-10 * std::abs(s.trace()) / static_cast<double>(s.rows());
        llt.compute(s + jitter * Matrix::Identity(s.rows(), s.cols()));
        if (llt.info() != Eigen::Success || !(jitter > 0.0)) {
            fail(ErrorKind::numeric, std::string(what) + ": innovation covariance is singular");
        }
    }
    return llt.solve(cross.transpose()).transpose();
}

KalmanState kalman_analysis(const Gaussian& forecast, const Matrix& h, const Matrix& obs_noise, const Vector& y) {
    const Eigen::Index d = forecast.dim();
    require(h.cols() == d && h.rows() == y.size() && obs_noise.rows() == y.size(), ErrorKind::argument,
            "kalman_analysis: shape mismatch");
    const Matrix cross = forecast.cov * h.transpose();
    const Matrix gain = innovation_gain(cross, h * cross + obs_noise, "kalman_step");
    Gaussian analysis{forecast.mean + gain * (y - h * forecast.mean),
                      symmetrize((Matrix::Identity(d, d) - gain * h) * forecast.cov)};
    return KalmanState{std::move(analysis), forecast, gain};
}

KalmanState kalman_step(const Gaussian& state, const Matrix& a, const Matrix& h, const Matrix& model_noise,
                        const Matrix& obs_noise, const Vector& y) {
    check_shapes(state.dim(), y.size(), a, h, model_noise, obs_noise, "kalman_step");
    Gaussian forecast{a * state.mean, symmetrize(a * state.cov * a.transpose() + model_noise)};
    return kalman_analysis(forecast, h, obs_noise, y);
}

double riccati_residual(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                        const Matrix& forecast_cov) {
    const Eigen::Index d = a.rows();
    const Matrix cross = forecast_cov * h.transpose();
    const Matrix gain = innovation_gain(cross, h * cross + obs_noise, "riccati_residual");
    const Matrix next = a * (Matrix::Identity(d, d) - gain * h) * forecast_cov * a.transpose() + model_noise;
    return (forecast_cov - next).norm();
}

SteadyState steady_state_gain(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                              double tol, int max_iter) {
    const Eigen::Index d = a.rows();
    check_shapes(d, h.rows(), a, h, model_noise, obs_noise, "steady_state_gain");
    require(tol > 0.0 && max_iter >= 1, ErrorKind::argument, "steady_state_gain: tol and max_iter must be positive");
    const Matrix eye = Matrix::Identity(d, d);
    Matrix forecast = symmetrize(model_noise);
    for (int it = 1; it <= max_iter; ++it) {
        const Matrix cross = forecast * h.transpose();
        const Matrix gain = innovation_gain(cross, h * cross + obs_noise, "steady_state_gain");
        const Matrix analysis = symmetrize((eye - gain * h) * forecast);
        const Matrix next = symmetrize(a * analysis * a.transpose() + model_noise);
        require(all_finite(next), ErrorKind::non_convergence, "steady_state_gain: covariance recursion diverged");
        const double change = (next - forecast).norm();
        const double scale = 1.0 + forecast.norm();
        forecast = next;
        if (change <= tol * scale) {
            SteadyState out;
            const Matrix c2 = forecast * h.transpose();
            out.gain = innovation_gain(c2, h * c2 + obs_noise, "steady_state_gain");
            out.forecast_cov = forecast;
            out.analysis_cov = symmetrize((eye - out.gain * h) * forecast);
            out.iterations = it;
            out.residual = riccati_residual(a, h, model_noise, obs_noise, forecast);
            return out;
        }
    }
    std::ostringstream os;
    os << "steady_state_gain: no convergence after " << max_iter << " iterations, residual "
       << riccati_residual(a, h, model_noise, obs_noise, forecast);
    fail(ErrorKind::non_convergence, os.str());
}

Vector threedvar_step(const Vector& v, const StateSpaceModel& model, const Matrix& gain, const Vector& y,
                      bool stochastic, RngStream& rng) {
    require(gain.rows() == v.size() && gain.cols() == y.size(), ErrorKind::argument, "threedvar_step: gain shape");
    require(all_finite(gain), ErrorKind::argument, "threedvar_step: gain must be finite");
    Vector forecast = model.dynamics(v);
    if (stochastic) forecast += psd_factor(model.model_noise) * rng.normal_vector(v.size());
    return forecast + gain * (y - model.obs_map(forecast));
}

KalmanState exkf_step(const KalmanState& state, const StateSpaceModel& model, const Vector& y,
                      const JacobianMap& jac_dyn, const JacobianMap& jac_obs) {
    const Gaussian& prev = state.analysis;
    const Eigen::Index d = prev.dim();
    const Matrix a = jac_dyn ? jac_dyn(prev.mean) : model.jacobian_dynamics(prev.mean);
    Gaussian forecast{model.dynamics(prev.mean), symmetrize(a * prev.cov * a.transpose() + model.model_noise)};
    const Matrix h = jac_obs ? jac_obs(forecast.mean) : model.jacobian_obs(forecast.mean);
    require(a.rows() == d && a.cols() == d && h.cols() == d && h.rows() == y.size(), ErrorKind::argument,
            "exkf_step: Jacobian shape mismatch");
    const Matrix cross = forecast.cov * h.transpose();
    const Matrix gain = innovation_gain(cross, h * cross + model.obs_noise, "exkf_step");
    Gaussian analysis{forecast.mean + gain * (y - model.obs_map(forecast.mean)),
                      symmetrize((Matrix::Identity(d, d) - gain * h) * forecast.cov)};
    return KalmanState{std::move(analysis), std::move(forecast), gain};
}

void EnKFConfig::validate(Eigen::Index dim_state, Eigen::Index dim_obs, bool linear_obs) const {
    require(inflation >= 1.0, ErrorKind::configuration, "EnKF: inflation must be at least 1");
    if (!localization) return;
    const Localization& loc = *localization;
    require(loc.length > 0.0, ErrorKind::configuration, "EnKF: localization length must be positive");
    const Matrix& dm = loc.distance;
    require(dm.rows() == dim_state && dm.cols() == dim_state, ErrorKind::configuration,
            "EnKF: distance matrix must be d x d");
    require((dm - dm.transpose()).cwiseAbs().maxCoeff() == 0.0 && dm.minCoeff() >= 0.0 &&
                dm.diagonal().cwiseAbs().maxCoeff() == 0.0,
            ErrorKind::configuration, "EnKF: distance matrix must be symmetric, nonnegative, zero on the diagonal");
    if (!linear_obs) {
        require(loc.state_obs_distance && loc.obs_obs_distance, ErrorKind::configuration,
                "EnKF: localization with a nonlinear observation map needs state-observation and "
                "observation-observation distances");
        require(loc.state_obs_distance->rows() == dim_state && loc.state_obs_distance->cols() == dim_obs &&
                    loc.obs_obs_distance->rows() == dim_obs && loc.obs_obs_distance->cols() == dim_obs,
                ErrorKind::configuration, "EnKF: observation distance matrices have the wrong shape");
    }
}

Ensemble inflate(const Ensemble& e, double alpha) {
    require(alpha >= 1.0, ErrorKind::argument, "inflate: alpha must be at least 1");
    if (alpha == 1.0) return e;
    const Eigen::RowVectorXd mean = e.members.colwise().mean();
    Ensemble out{(e.members.rowwise() - mean) * alpha};
    out.members.rowwise() += mean;
    return out;
}

Matrix localize_cov(const Matrix& c, const Matrix& distance, double ell) {
    require(ell > 0.0, ErrorKind::argument, "localize_cov: length must be positive");
    require(c.rows() == distance.rows() && c.cols() == distance.cols(), ErrorKind::argument,
            "localize_cov: shape mismatch");
    return c.cwiseProduct(taper(distance, ell));
}

Ensemble enkf_step(const Ensemble& e, const StateSpaceModel& model, const Vector& y, const EnKFConfig& cfg,
                   std::uint64_t step) {
    const Eigen::Index n = e.size(), d = model.dim_state, k = model.dim_obs;
    require(n >= 2, ErrorKind::argument, "enkf_step: ensemble needs at least two members");
    require(e.dim() == d && y.size() == k, ErrorKind::argument, "enkf_step: shape mismatch");
    cfg.validate(d, k, model.linear_obs());

    Matrix forecast = propagate_members(model, e.members);
    if (cfg.model_noise) add_noise(forecast, psd_factor(model.model_noise), cfg.rng, "enkf.model", step);
    if (cfg.inflation != 1.0) forecast = inflate(Ensemble{forecast}, cfg.inflation).members;

    const Matrix predicted = observe_members(model, forecast);
    Matrix cvh, chh;
    if (cfg.localization && model.linear_obs()) {
        const Matrix& h = *model.obs_matrix;
        const Matrix c = localize_cov(cross_cov(forecast, forecast), cfg.localization->distance,
                                      cfg.localization->length);
        cvh = c * h.transpose();
        chh = h * cvh;
    } else {
        cvh = cross_cov(forecast, predicted);
        chh = cross_cov(predicted, predicted);
        if (cfg.localization) {
            const double ell = cfg.localization->length;
            cvh = cvh.cwiseProduct(taper(*cfg.localization->state_obs_distance, ell));
            chh = chh.cwiseProduct(taper(*cfg.localization->obs_obs_distance, ell));
        }
    }
    const Matrix gain = innovation_gain(cvh, chh + model.obs_noise, "enkf_step");

    // Perturbed data y - eta_n.
    Matrix innovations = (-predicted).rowwise() + y.transpose();
    Matrix eta = Matrix::Zero(n, k);
    add_noise(eta, cholesky_lower(model.obs_noise, "enkf_step: observation noise"), cfg.rng, "enkf.obs", step);
    innovations -= eta;
    return Ensemble{forecast + innovations * gain.transpose()};
}

Ensemble resample(const WeightedEnsemble& w, ResampleScheme scheme, RngStream& rng) {
    const Eigen::Index n = w.size();
    require(n >= 1 && w.weights.size() == n, ErrorKind::argument, "resample: empty or mismatched ensemble");
    require((w.weights.array() >= 0.0).all() && w.weights.allFinite(), ErrorKind::argument,
            "resample: weights must be finite and nonnegative");
    const double total = w.weights.sum();
    require(total > 0.0, ErrorKind::degenerate, "resample: all weights are zero");

    std::vector<double> cdf(static_cast<std::size_t>(n));
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        acc += w.weights(i) / total;
        cdf[static_cast<std::size_t>(i)] = acc;
    }
    cdf.back() = 1.0;
    auto pick = [&](double u) {
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        return static_cast<Eigen::Index>(std::min<std::ptrdiff_t>(it - cdf.begin(), n - 1));
    };

    Ensemble out{Matrix(n, w.dim())};
    const double dn = static_cast<double>(n);
    if (scheme == ResampleScheme::systematic) {
        const double offset = rng.uniform();
        for (Eigen::Index i = 0; i < n; ++i) out.members.row(i) = w.members.row(pick((i + offset) / dn));
    } else {
        for (Eigen::Index i = 0; i < n; ++i) out.members.row(i) = w.members.row(pick(rng.uniform()));
    }
    return out;
}

WeightedEnsemble bpf_step(const WeightedEnsemble& w, const StateSpaceModel& model, const Vector& y,
                          const ParticleConfig& cfg, std::uint64_t step, ParticleStepInfo* info) {
    w.validate();
    require(w.dim() == model.dim_state && y.size() == model.dim_obs, ErrorKind::argument, "bpf_step: shape mismatch");
    const WeightedEnsemble start = maybe_resample(w, cfg, step, "bpf.resample", info);

    Matrix forecast = propagate_members(model, start.members);
    add_noise(forecast, psd_factor(model.model_noise), cfg.rng, "bpf.model", step);
    const Matrix residual = (-observe_members(model, forecast)).rowwise() + y.transpose();
    const Vector loglik = -0.5 * weighted_sq_norms(residual, model.obs_noise, "bpf_step: observation noise").array();

    const Vector logw = start.weights.array().log().matrix() + loglik;
    if (info) info->log_likelihood = loglik;
    return WeightedEnsemble{std::move(forecast), normalize_log_weights(logw, "bpf_step")};
}

WeightedEnsemble opf_step(const WeightedEnsemble& w, const StateSpaceModel& model, const Vector& y,
                          const ParticleConfig& cfg, std::uint64_t step, ParticleStepInfo* info) {
    w.validate();
    require(model.linear_obs(), ErrorKind::precondition, "opf_step: the observation map must be linear");
    require(w.dim() == model.dim_state && y.size() == model.dim_obs, ErrorKind::argument, "opf_step: shape mismatch");
    Eigen::LLT<Matrix> sigma_llt(model.model_noise);
    require(sigma_llt.info() == Eigen::Success && min_eigenvalue_sym(model.model_noise) > 0.0,
            ErrorKind::precondition, "opf_step: model noise covariance must be positive definite");

    const Eigen::Index d = model.dim_state;
    const Matrix& h = *model.obs_matrix;
    const Matrix& sigma = model.model_noise;
    const Matrix s = symmetrize(h * sigma * h.transpose() + model.obs_noise);
    const Matrix gain = innovation_gain(sigma * h.transpose(), s, "opf_step");
    const Matrix c = symmetrize((Matrix::Identity(d, d) - gain * h) * sigma);

    const WeightedEnsemble start = maybe_resample(w, cfg, step, "opf.resample", info);
    const Matrix pushed = propagate_members(model, start.members);
    const Matrix residual = (-(pushed * h.transpose())).rowwise() + y.transpose();
    Matrix moved = pushed + residual * gain.transpose();
    add_noise(moved, psd_factor(c), cfg.rng, "opf.model", step);
    const Vector loglik = -0.5 * weighted_sq_norms(residual, s, "opf_step: innovation covariance").array();

    const Vector logw = start.weights.array().log().matrix() + loglik;
    if (info) info->log_likelihood = loglik;
    return WeightedEnsemble{std::move(moved), normalize_log_weights(logw, "opf_step")};
}

FilterTrace kalman_run(const StateSpaceModel& model, const ObservationSeries& obs) {
    require(model.linear_dynamics() && model.linear_obs(), ErrorKind::precondition,
            "kalman_run: the Kalman filter needs linear dynamics and observations");
    check_obs(model, obs);
    FilterTrace t = make_trace(obs.steps(), model.dim_state);
    Gaussian state = model.init;
    for (Eigen::Index j = 1; j <= obs.steps(); ++j) {
        state = kalman_step(state, *model.dynamics_matrix, *model.obs_matrix, model.model_noise, model.obs_noise,
                            obs.at(j))
                    .analysis;
        t.mean.row(j - 1) = state.mean.transpose();
        t.spread(j - 1) = state.cov.trace();
    }
    return t;
}

FilterTrace threedvar_run(const StateSpaceModel& model, const ObservationSeries& obs, const Matrix& gain,
                          bool stochastic, const RngStream& rng) {
    check_obs(model, obs);
    FilterTrace t = make_trace(obs.steps(), model.dim_state);
    t.spread.setConstant(std::numeric_limits<double>::quiet_NaN());
    Vector v = model.init.mean;
    for (Eigen::Index j = 1; j <= obs.steps(); ++j) {
        RngStream s = rng.derive("threedvar.model", static_cast<std::uint64_t>(j));
        v = threedvar_step(v, model, gain, obs.at(j), stochastic, s);
        t.mean.row(j - 1) = v.transpose();
    }
    return t;
}

FilterTrace exkf_run(const StateSpaceModel& model, const ObservationSeries& obs) {
    check_obs(model, obs);
    FilterTrace t = make_trace(obs.steps(), model.dim_state);
    KalmanState state{model.init, model.init, Matrix()};
    for (Eigen::Index j = 1; j <= obs.steps(); ++j) {
        state = exkf_step(state, model, obs.at(j));
        t.mean.row(j - 1) = state.analysis.mean.transpose();
        t.spread(j - 1) = state.analysis.cov.trace();
    }
    return t;
}

FilterTrace enkf_run(const StateSpaceModel& model, const ObservationSeries& obs, Eigen::Index members,
                     const EnKFConfig& cfg) {
    check_obs(model, obs);
    FilterTrace t = make_trace(obs.steps(), model.dim_state);
    Ensemble e = gaussian_sample(model.init, members, cfg.rng.derive("enkf.init"));
    for (Eigen::Index j = 1; j <= obs.steps(); ++j) {
        e = enkf_step(e, model, obs.at(j), cfg, static_cast<std::uint64_t>(j));
        const Gaussian g = ensemble_gaussian(e.members);
        t.mean.row(j - 1) = g.mean.transpose();
        t.spread(j - 1) = g.cov.trace();
    }
    return t;
}

namespace {

template <class Step>
FilterTrace particle_run(const StateSpaceModel& model, const ObservationSeries& obs, Eigen::Index members,
                         const ParticleConfig& cfg, const char* init_tag, Step step_fn) {
    check_obs(model, obs);
    require(members >= 1, ErrorKind::argument, "particle filter: need at least one particle");
    FilterTrace t = make_trace(obs.steps(), model.dim_state);
    Ensemble e0 = gaussian_sample(model.init, members, cfg.rng.derive(init_tag));
    WeightedEnsemble w{std::move(e0.members), Vector::Constant(members, 1.0 / static_cast<double>(members))};
    for (Eigen::Index j = 1; j <= obs.steps(); ++j) {
        w = step_fn(w, obs.at(j), static_cast<std::uint64_t>(j));
        auto [m, c] = weighted_moments(w);
        t.mean.row(j - 1) = m.transpose();
        t.spread(j - 1) = c.trace();
        t.ess(j - 1) = w.ess();
    }
    return t;
}

}  // namespace

FilterTrace bpf_run(const StateSpaceModel& model, const ObservationSeries& obs, Eigen::Index members,
                    const ParticleConfig& cfg) {
    return particle_run(model, obs, members, cfg, "bpf.init",
                        [&](const WeightedEnsemble& w, const Vector& y, std::uint64_t j) {
                            return bpf_step(w, model, y, cfg, j);
                        });
}

FilterTrace opf_run(const StateSpaceModel& model, const ObservationSeries& obs, Eigen::Index members,
                    const ParticleConfig& cfg) {
    return particle_run(model, obs, members, cfg, "opf.init",
                        [&](const WeightedEnsemble& w, const Vector& y, std::uint64_t j) {
                            return opf_step(w, model, y, cfg, j);
                        });
}

}  // namespace dakit::filters
