#include "dakit/learning.hpp"

#include "dakit/error.hpp"
#include "dakit/filters.hpp"
#include "dakit/parallel.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace dakit::learning {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

Eigen::Index tri_size(Eigen::Index n) { return n * (n + 1) / 2; }

// Row-major flattening of a path, matching TrajectoryPosterior.
Vector flatten(const Matrix& states) {
    Vector out(states.size());
    for (Eigen::Index j = 0; j < states.rows(); ++j) out.segment(j * states.cols(), states.cols()) = states.row(j).transpose();
    return out;
}

Matrix unflatten(const Vector& flat, Eigen::Index dim) {
    const Eigen::Index rows = flat.size() / dim;
    Matrix out(rows, dim);
    for (Eigen::Index j = 0; j < rows; ++j) out.row(j) = flat.segment(j * dim, dim).transpose();
    return out;
}

ad::Var column(const std::vector<ad::Var>& entries, Eigen::Index from, Eigen::Index count) {
    std::vector<ad::Var> parts(entries.begin() + from, entries.begin() + from + count);
    return parts.size() == 1 ? parts.front() : ad::vcat(parts);
}

ad::Var trace_of(const ad::Var& square) {
    return ad::sum(square * ad::constant_like(square, Matrix::Identity(square.rows(), square.cols())));
}

double spectral_radius(const Matrix& m) { return m.eigenvalues().cwiseAbs().maxCoeff(); }

}  // namespace

// ---------------------------------------------------------------------------
// Parameter vectors

Eigen::Index ParamBlock::size() const { return kind == BlockKind::log_cholesky ? tri_size(rows) : rows * cols; }

ParamLayout& ParamLayout::add(const std::string& name, BlockKind kind, Eigen::Index rows, Eigen::Index cols) {
    require(!has(name), ErrorKind::configuration, "ParamLayout: duplicate block '" + name + "'");
    require(rows >= 1 && cols >= 1, ErrorKind::configuration, "ParamLayout: empty block '" + name + "'");
    require(kind != BlockKind::log_cholesky || rows == cols, ErrorKind::configuration,
            "ParamLayout: log-Cholesky block '" + name + "' must be square");
    ParamBlock b{name, kind, rows, cols, size_};
    size_ += b.size();
    blocks_.push_back(std::move(b));
    return *this;
}

bool ParamLayout::has(const std::string& name) const {
    for (const ParamBlock& b : blocks_)
        if (b.name == name) return true;
    return false;
}

const ParamBlock& ParamLayout::at(const std::string& name) const {
    for (const ParamBlock& b : blocks_)
        if (b.name == name) return b;
    fail(ErrorKind::argument, "ParamLayout: no block named '" + name + "'");
}

Matrix ParamLayout::decode(const Vector& theta, const std::string& name) const {
    require(theta.size() == size_, ErrorKind::argument, "ParamLayout: parameter vector has the wrong length");
    const ParamBlock& b = at(name);
    const Vector part = theta.segment(b.offset, b.size());
    if (b.kind == BlockKind::log_cholesky) return log_cholesky_decode(part, b.rows);
    return part.reshaped(b.rows, b.cols);
}

ad::Var ParamLayout::decode(const std::vector<ad::Var>& theta, const std::string& name) const {
    require(static_cast<Eigen::Index>(theta.size()) == size_, ErrorKind::argument,
            "ParamLayout: parameter vector has the wrong length");
    const ParamBlock& b = at(name);
    const std::vector<ad::Var> part(theta.begin() + b.offset, theta.begin() + b.offset + b.size());
    if (b.kind == BlockKind::log_cholesky) return log_cholesky_decode(part, b.rows);
    const ad::Var col = column(part, 0, b.size());
    return b.cols == 1 ? col : ad::reshape(col, static_cast<int>(b.rows), static_cast<int>(b.cols));
}

void ParamLayout::encode(Vector& theta, const std::string& name, const Matrix& m) const {
    require(theta.size() == size_, ErrorKind::argument, "ParamLayout: parameter vector has the wrong length");
    const ParamBlock& b = at(name);
    require(m.rows() == b.rows && m.cols() == b.cols, ErrorKind::argument, "ParamLayout: shape mismatch for '" + name + "'");
    theta.segment(b.offset, b.size()) = b.kind == BlockKind::log_cholesky ? log_cholesky_encode(m) : Vector(m.reshaped());
}

Matrix log_cholesky_decode(const Vector& coords, Eigen::Index n) {
    require(coords.size() == tri_size(n), ErrorKind::argument, "log_cholesky_decode: wrong coordinate count");
    Matrix l = Matrix::Zero(n, n);
    Eigen::Index at = 0;
    for (Eigen::Index c = 0; c < n; ++c)
        for (Eigen::Index r = c; r < n; ++r, ++at) l(r, c) = r == c ? std::exp(coords(at)) : coords(at);
    return l * l.transpose();
}

Vector log_cholesky_encode(const Matrix& spd) {
    const Matrix l = cholesky_lower(spd, "log_cholesky_encode");
    const Eigen::Index n = spd.rows();
    Vector coords(tri_size(n));
    Eigen::Index at = 0;
    for (Eigen::Index c = 0; c < n; ++c)
        for (Eigen::Index r = c; r < n; ++r, ++at) coords(at) = r == c ? std::log(l(r, c)) : l(r, c);
    return coords;
}

ad::Var log_cholesky_decode(const std::vector<ad::Var>& coords, Eigen::Index n) {
    require(static_cast<Eigen::Index>(coords.size()) == tri_size(n), ErrorKind::argument,
            "log_cholesky_decode: wrong coordinate count");
    const ad::Var zero = ad::constant_like(coords.front(), Matrix::Zero(1, 1));
    std::vector<ad::Var> entries;  // column-major n x n
    entries.reserve(static_cast<std::size_t>(n * n));
    std::size_t at = 0;
    for (Eigen::Index c = 0; c < n; ++c)
        for (Eigen::Index r = 0; r < n; ++r) {
            if (r < c) {
                entries.push_back(zero);
            } else {
                entries.push_back(r == c ? ad::exp(coords[at]) : coords[at]);
                ++at;
            }
        }
    const ad::Var l = n == 1 ? entries.front() : ad::reshape(ad::vcat(entries), static_cast<int>(n), static_cast<int>(n));
    return ad::matmul(l, ad::transpose(l));
}

// ---------------------------------------------------------------------------
// Smoothing distributions

TrajectoryPosterior smoothing_posterior(const StateSpaceModel& model, const ObservationSeries& obs) {
    require(model.linear_dynamics() && model.linear_obs(), ErrorKind::precondition,
            "smoothing_posterior: needs linear dynamics and observations");
    model.validate();
    const Eigen::Index d = model.dim_state, k = model.dim_obs, steps = obs.steps();
    require(obs.obs.cols() == k, ErrorKind::argument, "smoothing_posterior: observation width");
    const Eigen::Index n = d * (steps + 1);
    require(n <= 2000, ErrorKind::precondition, "smoothing_posterior: d(J+1) exceeds 2000");
    const Matrix& a = *model.dynamics_matrix;
    const Matrix& h = *model.obs_matrix;

    // Prior law of the path: mean rollout and the block covariance
    // Cov(v_l, v_j) = A^{l-j} P_j for l >= j.
    Vector mean(n);
    Matrix prior(n, n);
    mean.segment(0, d) = model.init.mean;
    Matrix pj = model.init.cov;
    for (Eigen::Index j = 0; j <= steps; ++j) {
        if (j > 0) {
            mean.segment(j * d, d) = a * mean.segment((j - 1) * d, d);
            pj = symmetrize(a * pj * a.transpose() + model.model_noise);
        }
        prior.block(j * d, j * d, d, d) = pj;
        for (Eigen::Index l = j + 1; l <= steps; ++l) {
            prior.block(l * d, j * d, d, d).noalias() = a * prior.block((l - 1) * d, j * d, d, d);
            prior.block(j * d, l * d, d, d) = prior.block(l * d, j * d, d, d).transpose();
        }
    }

    // Y = L V + noise with L picking H v_j for j = 1..J.
    const Eigen::Index m = k * steps;
    Matrix lp(m, n);
    Vector innov(m);
    for (Eigen::Index j = 1; j <= steps; ++j) {
        lp.middleRows((j - 1) * k, k) = h * prior.middleRows(j * d, d);
        innov.segment((j - 1) * k, k) = obs.at(j) - h * mean.segment(j * d, d);
    }
    Matrix s(m, m);
    for (Eigen::Index j = 1; j <= steps; ++j) s.middleCols((j - 1) * k, k) = lp.middleCols(j * d, d) * h.transpose();
    for (Eigen::Index j = 0; j < steps; ++j) s.block(j * k, j * k, k, k) += model.obs_noise;
    Eigen::LLT<Matrix> llt(symmetrize(s));
    require(llt.info() == Eigen::Success, ErrorKind::numeric, "smoothing_posterior: data covariance not positive definite");

    TrajectoryPosterior post;
    post.dim = d;
    // With S = R R^T and W = R^{-1} L P the update is P - W^T W.
    const Matrix w = llt.matrixL().solve(lp);
    post.mean = unflatten(mean + w.transpose() * llt.matrixL().solve(innov), d);
    post.cov = prior;
    post.cov.selfadjointView<Eigen::Lower>().rankUpdate(w.transpose(), -1.0);
    post.cov.triangularView<Eigen::StrictlyUpper>() = post.cov.transpose();
    return post;
}

SmootherSampleSet exact_smoother_samples(const StateSpaceModel& model, const ObservationSeries& obs,
                                         Eigen::Index samples, const RngStream& rng) {
    require(samples >= 1, ErrorKind::argument, "exact_smoother_samples: need at least one sample");
    const TrajectoryPosterior post = smoothing_posterior(model, obs);
    const Matrix factor = psd_factor(post.cov);
    const Vector mean = flatten(post.mean);
    SmootherSampleSet out;
    out.trajectories.resize(static_cast<std::size_t>(samples));
    parallel_for(out.trajectories.size(), [&](std::size_t i) {
        RngStream s = rng.derive("smoother.sample", i);
        out.trajectories[i].states = unflatten(mean + factor * s.normal_vector(factor.cols()), post.dim);
    });
    return out;
}

SmootherSampleSet ensemble_smoother_samples(const StateSpaceModel& model, const ObservationSeries& obs,
                                            Eigen::Index members, const RngStream& rng) {
    require(members >= 2, ErrorKind::argument, "ensemble_smoother_samples: need at least two members");
    model.validate();
    const Eigen::Index d = model.dim_state, k = model.dim_obs, steps = obs.steps();
    const auto nn = static_cast<std::size_t>(members);
    const Matrix noise_factor = psd_factor(model.model_noise);
    const Matrix obs_factor = psd_factor(model.obs_noise);

    // Each row is one member's path, flattened row-major.
    Matrix paths = Matrix::Zero(members, d * (steps + 1));
    paths.leftCols(d) = gaussian_sample(model.init, members, rng.derive("enks.init")).members;
    Matrix hv(members, k);
    Matrix innov(members, k);
    for (Eigen::Index j = 1; j <= steps; ++j) {
        const Vector y = obs.at(j);
        parallel_for(nn, [&](std::size_t m) {
            const auto i = static_cast<Eigen::Index>(m);
            RngStream sm = rng.derive("enks.model", static_cast<std::uint64_t>(j), m);
            const Vector prev = paths.row(i).segment((j - 1) * d, d).transpose();
            const Vector next = model.dynamics(prev) + noise_factor * sm.normal_vector(noise_factor.cols());
            paths.row(i).segment(j * d, d) = next.transpose();
            hv.row(i) = model.obs_map(next).transpose();
            RngStream so = rng.derive("enks.obs", static_cast<std::uint64_t>(j), m);
            innov.row(i) = (y - obs_factor * so.normal_vector(obs_factor.cols()) - hv.row(i).transpose()).transpose();
        });
        const auto past = paths.leftCols((j + 1) * d);
        const Matrix xc = past.rowwise() - past.colwise().mean();
        const Matrix hc = hv.rowwise() - hv.colwise().mean();
        const double dn = static_cast<double>(members);
        const Matrix cross = xc.transpose() * hc / dn;
        const Matrix gain = filters::innovation_gain(cross, symmetrize(hc.transpose() * hc / dn + model.obs_noise),
                                                     "ensemble_smoother_samples");
        paths.leftCols((j + 1) * d) += innov * gain.transpose();
    }
    SmootherSampleSet out;
    out.approximate = true;
    out.trajectories.resize(nn);
    for (std::size_t m = 0; m < nn; ++m)
        out.trajectories[m].states = unflatten(paths.row(static_cast<Eigen::Index>(m)).transpose(), d);
    return out;
}

// ---------------------------------------------------------------------------
// EM

Matrix eigen_floor(const Matrix& sym, double floor) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(sym));
    const Vector ev = es.eigenvalues().cwiseMax(floor);
    return symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

CovarianceUpdate em_update_covariances(const StateSpaceModel& model, const ObservationSeries& obs,
                                       const SmootherSampleSet& samples) {
    require(samples.size() >= 1, ErrorKind::argument, "em_update_covariances: empty sample set");
    const Eigen::Index d = model.dim_state, k = model.dim_obs, steps = obs.steps();
    require(steps >= 1, ErrorKind::argument, "em_update_covariances: need at least one observation");
    std::vector<Matrix> gam(samples.size()), sig(samples.size());
    parallel_for(samples.size(), [&](std::size_t s) {
        const Trajectory& v = samples.trajectories[s];
        require(v.steps() == steps && v.states.cols() == d, ErrorKind::argument,
                "em_update_covariances: trajectory shape does not match the data");
        gam[s] = Matrix::Zero(k, k);
        sig[s] = Matrix::Zero(d, d);
        for (Eigen::Index j = 1; j <= steps; ++j) {
            const Vector ro = obs.at(j) - model.obs_map(v.state(j));
            const Vector rm = v.state(j) - model.dynamics(v.state(j - 1));
            gam[s] += ro * ro.transpose();
            sig[s] += rm * rm.transpose();
        }
    });
    CovarianceUpdate u{Matrix::Zero(k, k), Matrix::Zero(d, d)};
    for (std::size_t s = 0; s < samples.size(); ++s) {
        u.obs_noise += gam[s];
        u.model_noise += sig[s];
    }
    const double scale = 1.0 / (static_cast<double>(steps) * static_cast<double>(samples.size()));
    u.obs_noise = eigen_floor(scale * u.obs_noise);
    u.model_noise = eigen_floor(scale * u.model_noise);
    return u;
}

CovarianceUpdate em_update_covariances(const StateSpaceModel& model, const ObservationSeries& obs,
                                       const TrajectoryPosterior& post) {
    require(model.linear_dynamics() && model.linear_obs(), ErrorKind::precondition,
            "em_update_covariances: exact expectations need linear dynamics and observations");
    const Matrix& a = *model.dynamics_matrix;
    const Matrix& h = *model.obs_matrix;
    const Eigen::Index steps = obs.steps();
    require(post.mean.rows() == steps + 1, ErrorKind::argument, "em_update_covariances: posterior length");
    CovarianceUpdate u{Matrix::Zero(model.dim_obs, model.dim_obs), Matrix::Zero(model.dim_state, model.dim_state)};
    for (Eigen::Index j = 1; j <= steps; ++j) {
        const Vector mj = post.mean.row(j).transpose(), mp = post.mean.row(j - 1).transpose();
        const Vector ro = obs.at(j) - h * mj;
        u.obs_noise += ro * ro.transpose() + h * post.block(j, j) * h.transpose();
        const Vector rm = mj - a * mp;
        const Matrix cross = a * post.block(j - 1, j);
        u.model_noise += rm * rm.transpose() + post.block(j, j) - cross - cross.transpose() +
                         a * post.block(j - 1, j - 1) * a.transpose();
    }
    const double scale = 1.0 / static_cast<double>(steps);
    u.obs_noise = eigen_floor(scale * u.obs_noise);
    u.model_noise = eigen_floor(scale * u.model_noise);
    return u;
}

EmTrace em_run(const StateSpaceModel& model, const ObservationSeries& obs, const EmConfig& cfg) {
    require(cfg.iters >= 0, ErrorKind::argument, "em_run: negative iteration count");
    require(cfg.samples >= 0, ErrorKind::argument, "em_run: negative sample count");
    StateSpaceModel current = model;
    EmTrace t;
    auto record = [&] {
        t.model_noise.push_back(current.model_noise);
        t.obs_noise.push_back(current.obs_noise);
        t.loglik.push_back(kf_loglik(current, obs));
    };
    record();
    for (int it = 0; it < cfg.iters; ++it) {
        const CovarianceUpdate u =
            cfg.samples == 0
                ? em_update_covariances(current, obs, smoothing_posterior(current, obs))
                : em_update_covariances(current, obs,
                                        exact_smoother_samples(current, obs, cfg.samples,
                                                               cfg.rng.derive("em", static_cast<std::uint64_t>(it))));
        if (cfg.update_model_noise) current.model_noise = u.model_noise;
        if (cfg.update_obs_noise) current.obs_noise = u.obs_noise;
        record();
    }
    return t;
}

// ---------------------------------------------------------------------------
// Kalman likelihood

double kf_loglik(const StateSpaceModel& model, const ObservationSeries& obs) {
    require(model.linear_obs(), ErrorKind::precondition, "kf_loglik: the observation map must be linear");
    model.validate();
    const Matrix& h = *model.obs_matrix;
    const Eigen::Index k = model.dim_obs;
    Vector m = model.init.mean;
    Matrix c = model.init.cov;
    double ll = 0.0;
    for (Eigen::Index j = 1; j <= obs.steps(); ++j) {
        const Matrix f = model.linear_dynamics() ? *model.dynamics_matrix : model.jacobian_dynamics(m);
        const Vector mf = model.linear_dynamics() ? Vector(f * m) : model.dynamics(m);
        const Matrix cf = symmetrize(f * c * f.transpose() + model.model_noise);
        const Matrix hc = h * cf;
        Eigen::LLT<Matrix> llt(symmetrize(hc * h.transpose() + model.obs_noise));
        require(llt.info() == Eigen::Success, ErrorKind::numeric, "kf_loglik: innovation covariance is singular");
        const Vector e = obs.at(j) - h * mf;
        const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        ll -= 0.5 * (e.dot(llt.solve(e)) + logdet + static_cast<double>(k) * kLog2Pi);
        const Matrix w = llt.solve(hc);  // S^{-1} H C_f
        m = mf + w.transpose() * e;
        c = symmetrize(cf - hc.transpose() * w);
    }
    return ll;
}

ad::Var kf_loglik(const LinearGaussianVars& mv, const ObservationSeries& obs) {
    const Eigen::Index k = mv.obs.rows();
    require(obs.obs.cols() == k, ErrorKind::argument, "kf_loglik: observation width");
    ad::Var m = mv.init_mean;
    ad::Var c = mv.init_cov;
    const ad::Var at = ad::transpose(mv.dynamics);
    const ad::Var ht = ad::transpose(mv.obs);
    ad::Var ll = ad::constant_like(mv.obs, Matrix::Zero(1, 1));
    for (Eigen::Index j = 1; j <= obs.steps(); ++j) {
        const ad::Var mf = ad::matvec(mv.dynamics, m);
        const ad::Var cf = ad::matmul(ad::matmul(mv.dynamics, c), at) + mv.model_noise;
        const ad::Var hc = ad::matmul(mv.obs, cf);
        const ad::Var s = ad::matmul(hc, ht) + mv.obs_noise;
        const ad::Var e = ad::constant_like(mv.obs, obs.at(j)) - ad::matvec(mv.obs, mf);
        ll = ll - 0.5 * (ad::dot(e, ad::cholesky_solve(s, e)) + ad::logdet(s));
        const ad::Var w = ad::cholesky_solve(s, hc);
        m = mf + ad::matvec(ad::transpose(w), e);
        c = cf - ad::matmul(ad::transpose(hc), w);
    }
    return ll - 0.5 * static_cast<double>(obs.steps() * k) * kLog2Pi;
}

namespace {

const char* const kFamilyBlocks[] = {"dynamics", "obs", "model_noise", "obs_noise", "init_mean", "init_cov"};

Matrix base_block(const StateSpaceModel& m, const std::string& name) {
    if (name == "dynamics") return *m.dynamics_matrix;
    if (name == "obs") return *m.obs_matrix;
    if (name == "model_noise") return m.model_noise;
    if (name == "obs_noise") return m.obs_noise;
    if (name == "init_mean") return m.init.mean;
    return m.init.cov;
}

}  // namespace

void KfFamily::validate() const {
    require(base.linear_dynamics() && base.linear_obs(), ErrorKind::configuration,
            "KfFamily: the base model must be linear");
    for (const ParamBlock& b : layout.blocks()) {
        bool known = false;
        for (const char* name : kFamilyBlocks) known = known || b.name == name;
        require(known, ErrorKind::configuration, "KfFamily: unknown block '" + b.name + "'");
        const Matrix ref = base_block(base, b.name);
        require(b.rows == ref.rows() && b.cols == ref.cols(), ErrorKind::configuration,
                "KfFamily: block '" + b.name + "' has the wrong shape");
        const bool covariance = b.name == "model_noise" || b.name == "obs_noise" || b.name == "init_cov";
        require(covariance == (b.kind == BlockKind::log_cholesky), ErrorKind::configuration,
                "KfFamily: covariance blocks use log-Cholesky coordinates, other blocks free ones ('" + b.name + "')");
    }
}

StateSpaceModel KfFamily::model(const Vector& theta) const {
    auto pick = [&](const char* name) { return layout.has(name) ? layout.decode(theta, name) : base_block(base, name); };
    const Vector mean = pick("init_mean");
    return make_linear_model(pick("dynamics"), pick("obs"), pick("model_noise"), pick("obs_noise"),
                             Gaussian{mean, pick("init_cov")});
}

LinearGaussianVars KfFamily::vars(const std::vector<ad::Var>& theta) const {
    require(!theta.empty(), ErrorKind::argument, "KfFamily: empty parameter vector");
    auto pick = [&](const char* name) {
        return layout.has(name) ? layout.decode(theta, name) : ad::constant_like(theta.front(), base_block(base, name));
    };
    return {pick("dynamics"), pick("obs"), pick("model_noise"), pick("obs_noise"), pick("init_mean"), pick("init_cov")};
}

Vector KfFamily::encode(const StateSpaceModel& m) const {
    Vector theta = Vector::Zero(layout.size());
    for (const ParamBlock& b : layout.blocks()) layout.encode(theta, b.name, base_block(m, b.name));
    return theta;
}

ad::Program kf_loglik_program(const KfFamily& family, const ObservationSeries& obs) {
    family.validate();
    return [family, obs](ad::Tape&, const std::vector<ad::Var>& x) -> std::vector<ad::Var> {
        return {kf_loglik(family.vars(x), obs)};
    };
}

MleResult fit_mle_autodiff_kf(const KfFamily& family, const ObservationSeries& obs, const Vector& theta0,
                              const MleConfig& cfg) {
    family.validate();
    require(theta0.size() == family.layout.size(), ErrorKind::argument, "fit_mle_autodiff_kf: theta0 length");
    family.model(theta0).validate();
    const ad::Program program = kf_loglik_program(family, obs);
    optimize::Objective neg;
    // Trial points whose decoded model is unusable (overflowing covariances,
    // singular innovations) count as infinitely bad so the line search backs off.
    neg.value = [&](const Vector& theta) {
        try {
            return -kf_loglik(family.model(theta), obs);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::numeric || e.kind() == ErrorKind::argument ||
                e.kind() == ErrorKind::configuration)
                return kInf;
            throw;
        }
    };
    // The recursion has no data-dependent branches, so one recording serves
    // every later gradient through replay.
    std::optional<ad::Tape> tape;
    neg.gradient = [&](const Vector& theta) -> Vector {
        if (!tape) tape = ad::record(program, theta);
        return -ad::reverse_gradient(*tape, theta);
    };
    MleResult r;
    r.trace = optimize::gradient_descent(neg, theta0, cfg.step, cfg.steps, cfg.gradient_tol);
    for (double& v : r.trace.values) v = -v;
    r.estimate = ParamVector{r.trace.last(), family.layout};
    return r;
}

// ---------------------------------------------------------------------------
// Monte Carlo EM

StateSpaceModel instantiate(const StateSpaceModel& base, const DynamicsFamily& family, const Vector& theta,
                            const Matrix& model_noise) {
    require(theta.size() == family.params, ErrorKind::argument, "instantiate: parameter length");
    require(static_cast<bool>(family.map), ErrorKind::configuration, "instantiate: family has no map");
    StateSpaceModel m = base;
    m.dynamics = [map = family.map, theta](const Vector& v) { return map(theta, v); };
    m.dynamics_matrix = family.matrix ? family.matrix(theta) : std::nullopt;
    m.dynamics_jacobian = {};
    m.dynamics_tape = {};
    if (family.tape_map)
        m.dynamics_tape = [tape_map = family.tape_map, theta](const ad::Var& v) {
            return tape_map(ad::constant_like(v, theta), v);
        };
    m.model_noise = model_noise;
    return m;
}

namespace {

void check_samples(const SmootherSampleSet& samples) {
    require(samples.size() >= 1, ErrorKind::argument, "mcem: empty sample set");
    const Eigen::Index steps = samples.trajectories.front().steps();
    require(steps >= 1, ErrorKind::argument, "mcem: trajectories need at least one transition");
    for (const Trajectory& t : samples.trajectories)
        require(t.steps() == steps, ErrorKind::argument, "mcem: trajectories of unequal length");
}

}  // namespace

Matrix mcem_model_noise(const DynamicsFamily& family, const SmootherSampleSet& samples, const Vector& theta) {
    check_samples(samples);
    const Eigen::Index steps = samples.trajectories.front().steps();
    const Eigen::Index d = samples.trajectories.front().states.cols();
    std::vector<Matrix> part(samples.size());
    parallel_for(samples.size(), [&](std::size_t s) {
        const Trajectory& v = samples.trajectories[s];
        part[s] = Matrix::Zero(d, d);
        for (Eigen::Index j = 0; j < steps; ++j) {
            const Vector r = v.state(j + 1) - family.map(theta, v.state(j));
            part[s] += r * r.transpose();
        }
    });
    Matrix sum = Matrix::Zero(d, d);
    for (const Matrix& p : part) sum += p;
    return symmetrize(sum / (static_cast<double>(steps) * static_cast<double>(samples.size())));
}

double mcem_objective(const DynamicsFamily& family, const SmootherSampleSet& samples, const Vector& theta) {
    const Matrix sigma = mcem_model_noise(family, samples, theta);
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success || !sigma.allFinite()) return -kInf;
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return -0.5 * static_cast<double>(samples.trajectories.front().steps()) * logdet;
}

ad::Var mcem_objective(const DynamicsFamily& family, const SmootherSampleSet& samples, const ad::Var& theta) {
    check_samples(samples);
    require(static_cast<bool>(family.tape_map), ErrorKind::configuration, "mcem_objective: family has no tape map");
    const Eigen::Index steps = samples.trajectories.front().steps();
    const Eigen::Index d = samples.trajectories.front().states.cols();
    std::vector<ad::Var> residuals;
    residuals.reserve(samples.size() * static_cast<std::size_t>(steps));
    for (const Trajectory& v : samples.trajectories)
        for (Eigen::Index j = 0; j < steps; ++j)
            residuals.push_back(ad::constant_like(theta, v.state(j + 1)) -
                                family.tape_map(theta, ad::constant_like(theta, v.state(j))));
    const auto count = static_cast<int>(residuals.size());
    const ad::Var r = ad::reshape(ad::vcat(residuals), static_cast<int>(d), count);
    const ad::Var sigma = ad::matmul(r, ad::transpose(r)) / static_cast<double>(count);
    return -0.5 * static_cast<double>(steps) * ad::logdet(sigma);
}

McEmTrace mc_em_run(const StateSpaceModel& base, const DynamicsFamily& family, const ObservationSeries& obs,
                    const Vector& theta0, const Matrix& model_noise0, const McEmConfig& cfg) {
    require(cfg.outer >= 0 && cfg.inner >= 0, ErrorKind::argument, "mc_em_run: negative iteration count");
    require(cfg.samples >= 1, ErrorKind::argument, "mc_em_run: need at least one sample per E-step");
    require(base.linear_obs(), ErrorKind::precondition, "mc_em_run: the observation map must be linear");
    require(static_cast<bool>(family.tape_map), ErrorKind::configuration, "mc_em_run: family has no tape map");
    McEmTrace t;
    Vector theta = theta0;
    Matrix sigma = model_noise0;
    t.theta.push_back(theta);
    t.model_noise.push_back(sigma);
    for (int l = 0; l < cfg.outer; ++l) {
        const StateSpaceModel model = instantiate(base, family, theta, sigma);
        const RngStream e_rng = cfg.rng.derive("mcem.e", static_cast<std::uint64_t>(l));
        SmootherSampleSet samples;
        if (model.linear_dynamics()) {
            samples = exact_smoother_samples(model, obs, cfg.samples, e_rng);
        } else {
            samples = ensemble_smoother_samples(model, obs, std::max<Eigen::Index>(cfg.samples, 2), e_rng);
            t.approximate_e_step = true;
        }

        const ad::Program program = [&](ad::Tape&, const std::vector<ad::Var>& x) -> std::vector<ad::Var> {
            return {mcem_objective(family, samples, x.size() == 1 ? x.front() : ad::vcat(x))};
        };
        optimize::Objective neg;
        neg.value = [&](const Vector& th) { return -mcem_objective(family, samples, th); };
        std::optional<ad::Tape> tape;
        neg.gradient = [&](const Vector& th) -> Vector {
            if (!tape) tape = ad::record(program, th);
            return -ad::reverse_gradient(*tape, th);
        };
        const optimize::Trace inner = optimize::gradient_descent(neg, theta, cfg.step, cfg.inner);
        std::vector<double> values;
        for (double v : inner.values) values.push_back(-v);
        t.inner_objective.push_back(std::move(values));
        theta = inner.last();
        if (inner.reason == optimize::StopReason::non_finite) {
            t.aborted = true;
            t.message = "mc_em_run: " + inner.message;
            t.theta.push_back(theta);
            t.model_noise.push_back(sigma);
            return t;
        }
        // A failed line search means no ascent direction is left at this
        // resolution; keep the current iterate and go on.
        sigma = eigen_floor(mcem_model_noise(family, samples, theta));
        t.theta.push_back(theta);
        t.model_noise.push_back(sigma);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Increment correction

FeatureBasis linear_features(Eigen::Index dim) {
    return {dim, [](const Vector& v) { return v; }};
}

FeatureBasis affine_features(Eigen::Index dim) {
    return {dim + 1, [](const Vector& v) {
                Vector f(v.size() + 1);
                f << 1.0, v;
                return f;
            }};
}

FeatureBasis quadratic_features(Eigen::Index dim) {
    return {1 + dim + tri_size(dim), [](const Vector& v) {
                const Eigen::Index d = v.size();
                Vector f(1 + d + tri_size(d));
                f(0) = 1.0;
                f.segment(1, d) = v;
                Eigen::Index at = 1 + d;
                for (Eigen::Index i = 0; i < d; ++i)
                    for (Eigen::Index j = i; j < d; ++j) f(at++) = v(i) * v(j);
                return f;
            }};
}

std::vector<IncrementPair> increment_pairs(const Trajectory& path, const VectorMap& approx_dynamics) {
    std::vector<IncrementPair> out;
    out.reserve(static_cast<std::size_t>(std::max<Eigen::Index>(path.steps(), 0)));
    for (Eigen::Index j = 0; j < path.steps(); ++j) {
        const Vector v = path.state(j);
        out.push_back({v, path.state(j + 1) - approx_dynamics(v)});
    }
    return out;
}

IncrementCorrection learn_increment_correction(const std::vector<IncrementPair>& pairs, const FeatureBasis& basis,
                                               double ridge) {
    require(!pairs.empty(), ErrorKind::argument, "learn_increment_correction: no pairs");
    require(ridge >= 0.0 && std::isfinite(ridge), ErrorKind::argument, "learn_increment_correction: ridge must be >= 0");
    require(basis.count >= 1 && static_cast<bool>(basis.eval), ErrorKind::argument,
            "learn_increment_correction: empty feature basis");
    const Eigen::Index p = basis.count, d = pairs.front().increment.size();
    Matrix gram = Matrix::Zero(p, p);
    Matrix rhs = Matrix::Zero(p, d);
    for (const IncrementPair& pr : pairs) {
        const Vector f = basis.eval(pr.state);
        require(f.size() == p && pr.increment.size() == d, ErrorKind::argument,
                "learn_increment_correction: inconsistent pair or feature sizes");
        gram += f * f.transpose();
        rhs += f * pr.increment.transpose();
    }
    Matrix coef;
    if (ridge == 0.0) {
        Eigen::FullPivLU<Matrix> lu(gram);
        require(lu.rank() == p, ErrorKind::numeric, "learn_increment_correction: features are rank deficient");
        coef = lu.solve(rhs);
    } else {
        coef = spd_solve(gram + ridge * Matrix::Identity(p, p), rhs, "learn_increment_correction");
    }
    return {coef.transpose(), basis};
}

VectorMap corrected_dynamics(const VectorMap& approx_dynamics, const IncrementCorrection& correction) {
    return [approx_dynamics, correction](const Vector& v) -> Vector { return approx_dynamics(v) + correction(v); };
}

// ---------------------------------------------------------------------------
// Fixed gain

double fixed_gain_objective(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                            const Matrix& c0, const Matrix& gain, Eigen::Index steps) {
    const Matrix closed = Matrix::Identity(a.rows(), a.rows()) - gain * h;
    const Matrix gain_noise = gain * obs_noise * gain.transpose();
    Matrix c = c0;
    double total = c.trace();
    for (Eigen::Index j = 1; j <= steps; ++j) {
        c = closed * (a * c * a.transpose() + model_noise) * closed.transpose() + gain_noise;
        total += c.trace();
    }
    return total / static_cast<double>(steps + 1);
}

ad::Var fixed_gain_objective(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                             const Matrix& c0, const ad::Var& gain, Eigen::Index steps) {
    const Eigen::Index d = a.rows();
    const ad::Var closed = ad::constant_like(gain, Matrix::Identity(d, d)) - ad::matmul(gain, ad::constant_like(gain, h));
    const ad::Var closed_t = ad::transpose(closed);
    const ad::Var gain_noise = ad::matmul(ad::matmul(gain, ad::constant_like(gain, obs_noise)), ad::transpose(gain));
    const ad::Var sigma = ad::constant_like(gain, model_noise);
    const ad::Var av = ad::constant_like(gain, a);
    const ad::Var at = ad::constant_like(gain, a.transpose());
    ad::Var c = ad::constant_like(gain, c0);
    ad::Var total = trace_of(c);
    for (Eigen::Index j = 1; j <= steps; ++j) {
        c = ad::matmul(ad::matmul(closed, ad::matmul(ad::matmul(av, c), at) + sigma), closed_t) + gain_noise;
        total = total + trace_of(c);
    }
    return total / static_cast<double>(steps + 1);
}

GainResult learn_fixed_gain(const Matrix& a, const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                            const Matrix& c0, Eigen::Index steps, const GainConfig& cfg) {
    const Eigen::Index d = a.rows(), k = h.rows();
    require(a.cols() == d && h.cols() == d && model_noise.rows() == d && obs_noise.rows() == k && c0.rows() == d,
            ErrorKind::argument, "learn_fixed_gain: shape mismatch");
    require(steps >= 1, ErrorKind::argument, "learn_fixed_gain: need at least one step");
    const Matrix k0 = cfg.initial_gain.value_or(Matrix::Zero(d, k));
    require(k0.rows() == d && k0.cols() == k, ErrorKind::argument, "learn_fixed_gain: initial gain shape");
    const auto loop_radius = [&](const Matrix& g) {
        return spectral_radius((Matrix::Identity(d, d) - g * h) * a);
    };
    require(loop_radius(k0) < 1.0, ErrorKind::precondition,
            "learn_fixed_gain: the initial gain does not stabilize (I - K H) A");

    GainResult r;
    optimize::Objective obj;
    obj.value = [&](const Vector& x) {
        const Matrix g = x.reshaped(d, k);
        if (loop_radius(g) >= 1.0) {
            ++r.divergent_trials;
            return kInf;
        }
        return fixed_gain_objective(a, h, model_noise, obs_noise, c0, g, steps);
    };
    const ad::Program program = [&](ad::Tape&, const std::vector<ad::Var>& x) -> std::vector<ad::Var> {
        const ad::Var col = x.size() == 1 ? x.front() : ad::vcat(x);
        const ad::Var g = k == 1 ? col : ad::reshape(col, static_cast<int>(d), static_cast<int>(k));
        return {fixed_gain_objective(a, h, model_noise, obs_noise, c0, g, steps)};
    };
    std::optional<ad::Tape> tape;
    obj.gradient = [&](const Vector& x) -> Vector {
        if (!tape) tape = ad::record(program, x);
        return ad::reverse_gradient(*tape, x);
    };
    r.trace = optimize::gradient_descent(obj, Vector(k0.reshaped()), cfg.step, cfg.iters, cfg.gradient_tol);
    r.gain = r.trace.last().reshaped(d, k);
    r.objective = r.trace.values.back();
    return r;
}

}  // namespace dakit::learning
