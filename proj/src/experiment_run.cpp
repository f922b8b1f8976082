#include "dakit/experiment.hpp"
#include "dakit/filters.hpp"
#include "dakit/io.hpp"
#include "dakit/learning.hpp"
#include "dakit/multifidelity.hpp"
#include "dakit/optimize.hpp"
#include "dakit/scoring.hpp"
#include "dakit/smoothers.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace dakit::experiment {

using nlohmann::json;

namespace {

std::string resolve(const RunOptions& opts, const std::string& path) {
    const std::filesystem::path p(path);
    return p.is_absolute() ? path : (std::filesystem::path(opts.base_dir) / p).string();
}

std::ifstream open_input(const RunOptions& opts, const std::string& path) {
    std::ifstream in(resolve(opts, path));
    require(in.good(), ErrorKind::io, "cannot open input file '" + path + "'");
    return in;
}

ObservationSeries load_obs(const RunOptions& opts, const std::string& path) {
    auto in = open_input(opts, path);
    return io::read_observations_csv(in);
}

Trajectory load_trajectory(const RunOptions& opts, const std::string& path) {
    auto in = open_input(opts, path);
    return io::read_trajectory_csv(in);
}

const ModelSettings& need_model(const ExperimentConfig& cfg, const std::string& command) {
    require(cfg.model.has_value(), ErrorKind::configuration, command + ": the configuration needs a model section");
    return *cfg.model;
}

void check_obs_width(const StateSpaceModel& m, const ObservationSeries& y) {
    require(y.obs.cols() == m.dim_obs, ErrorKind::configuration,
            "observation file has " + std::to_string(y.obs.cols()) + " columns, the model observes " +
                std::to_string(m.dim_obs));
}

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

json vector_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// Column names like m0..m{n-1}.
std::string names(const std::string& prefix, Eigen::Index n) {
    std::string out;
    for (Eigen::Index i = 0; i < n; ++i) out += (i ? "," : "") + prefix + std::to_string(i);
    return out;
}

// Row-major entry names q00, q01, ... of an r x c matrix.
std::string entry_names(const std::string& prefix, Eigen::Index r, Eigen::Index c) {
    std::string out;
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j)
            out += (out.empty() ? "" : ",") + prefix + std::to_string(i) + "_" + std::to_string(j);
    return out;
}

void append_entries(std::ostringstream& os, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) os << ',' << io::format_real(m(i, j));
}

void append_vector(std::ostringstream& os, const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ',' << io::format_real(v(i));
}

double rmse(const Matrix& a, const Matrix& b) { return std::sqrt((a - b).squaredNorm() / double(a.size())); }

Matrix index_distance(Eigen::Index d) {
    Matrix dist(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) dist(i, j) = double(std::abs(i - j));
    return dist;
}

// ---------------------------------------------------------------------------

RunResult run_generate(const ExperimentConfig& cfg) {
    const StateSpaceModel model = need_model(cfg, "generate").build();
    const GenerateSettings settings = cfg.generate.value_or(GenerateSettings{});
    const auto [truth, obs] = simulate(model, settings.steps, RngStream(cfg.seed).derive("generate"));
    std::ostringstream t, y;
    io::write_trajectory_csv(t, truth);
    io::write_observations_csv(y, obs);
    const json summary{{"steps", settings.steps}, {"dim_state", model.dim_state}, {"dim_obs", model.dim_obs}};
    return {{{"truth.csv", t.str()}, {"observations.csv", y.str()}}, summary.dump()};
}

filters::FilterTrace run_filter_algorithm(const FilterSettings& settings, const StateSpaceModel& model,
                                          const ObservationSeries& obs, const RngStream& rng) {
    const std::string& alg = settings.algorithm;
    if (alg == "kf") {
        require(model.linear_dynamics() && model.linear_obs(), ErrorKind::configuration,
                "filter: kf needs a linear model (use exkf or an ensemble filter)");
        return filters::kalman_run(model, obs);
    }
    if (alg == "3dvar") {
        Matrix gain;
        if (settings.gain) {
            gain = *settings.gain;
        } else {
            require(model.linear_dynamics() && model.linear_obs(), ErrorKind::configuration,
                    "filter: 3dvar without an explicit gain needs a linear model for the steady-state gain");
            gain = filters::steady_state_gain(*model.dynamics_matrix, *model.obs_matrix, model.model_noise,
                                              model.obs_noise)
                       .gain;
        }
        require(gain.rows() == model.dim_state && gain.cols() == model.dim_obs, ErrorKind::configuration,
                "filter.gain: expected a d x k matrix");
        return filters::threedvar_run(model, obs, gain, settings.stochastic, rng.derive("3dvar"));
    }
    if (alg == "exkf") return filters::exkf_run(model, obs);
    if (alg == "enkf") {
        filters::EnKFConfig ec;
        ec.inflation = settings.inflation;
        ec.rng = rng.derive("enkf");
        if (settings.loc_length) ec.localization = filters::Localization{.distance = index_distance(model.dim_state), .length = *settings.loc_length, .state_obs_distance = {}, .obs_obs_distance = {}};
        return filters::enkf_run(model, obs, settings.ensemble_size, ec);
    }
    filters::ParticleConfig pc;
    pc.rng = rng.derive(alg);
    pc.resample_threshold = settings.resample_threshold;
    return alg == "bpf" ? filters::bpf_run(model, obs, settings.ensemble_size, pc)
                        : filters::opf_run(model, obs, settings.ensemble_size, pc);
}

RunResult run_filter(const ExperimentConfig& cfg, const RunOptions& opts) {
    const StateSpaceModel model = need_model(cfg, "filter").build();
    const FilterSettings settings = cfg.filter.value_or(FilterSettings{});
    const ObservationSeries obs = load_obs(opts, settings.obs);
    check_obs_width(model, obs);
    const filters::FilterTrace trace = run_filter_algorithm(settings, model, obs, RngStream(cfg.seed).derive("filter"));

    const bool particle = settings.algorithm == "bpf" || settings.algorithm == "opf";
    std::ostringstream os;
    os << "j," << names("m", model.dim_state) << ",spread" << (particle ? ",ess" : "") << '\n';
    for (Eigen::Index j = 0; j < trace.mean.rows(); ++j) {
        os << (j + 1);
        append_vector(os, trace.mean.row(j).transpose());
        os << ',' << io::format_real(trace.spread(j));
        if (particle) os << ',' << io::format_real(trace.ess(j));
        os << '\n';
    }
    json summary{{"algorithm", settings.algorithm}, {"steps", obs.steps()}};
    if (settings.truth) {
        const Trajectory truth = load_trajectory(opts, *settings.truth);
        require(truth.steps() == obs.steps() && truth.states.cols() == model.dim_state, ErrorKind::configuration,
                "filter.truth: trajectory does not match the observations");
        summary["rmse"] = rmse(trace.mean, truth.states.bottomRows(obs.steps()));
    }
    return {{{"filter.csv", os.str()}}, summary.dump()};
}

RunResult run_smooth(const ExperimentConfig& cfg, const RunOptions& opts) {
    const StateSpaceModel model = need_model(cfg, "smooth").build();
    const SmoothSettings settings = cfg.smooth.value_or(SmoothSettings{});
    const ObservationSeries obs = load_obs(opts, settings.obs);
    check_obs_width(model, obs);
    smoothers::FourDVarProblem problem{model, obs,
                                       settings.mode == "weak" ? smoothers::Constraint::weak : smoothers::Constraint::strong};
    const Trajectory init = settings.init == "freerun" ? smoothers::rollout(model, model.init.mean, obs.steps())
                                                   : load_trajectory(opts, *settings.truth);
    const smoothers::SolveResult r = smoothers::fourdvar_solve(problem, init, settings.tol, settings.max_iter);
    std::ostringstream os;
    io::write_trajectory_csv(os, r.map);
    const json diag{{"mode", settings.mode},
                    {"iterations", r.diagnostics.iterations},
                    {"gradient_norm", r.diagnostics.gradient_norm},
                    {"objective", r.diagnostics.objective},
                    {"damping", r.diagnostics.damping}};
    const json summary{{"mode", settings.mode},
                       {"iterations", r.diagnostics.iterations},
                       {"objective", r.diagnostics.objective.empty() ? 0.0 : r.diagnostics.objective.back()}};
    return {{{"map.csv", os.str()}, {"diagnostics.json", dump(diag)}}, summary.dump()};
}

// --- learn ------------------------------------------------------------------

RunResult learn_em(const ExperimentConfig& cfg, const LearnSettings& settings, const StateSpaceModel& model,
                   const ObservationSeries& obs) {
    learning::EmConfig ec;
    ec.iters = settings.iters;
    ec.samples = settings.samples;
    ec.rng = RngStream(cfg.seed).derive("learn.em");
    const learning::EmTrace t = learning::em_run(model, obs, ec);
    const Eigen::Index d = model.dim_state, k = model.dim_obs;
    std::ostringstream os;
    os << "iter,loglik," << entry_names("q", d, d) << ',' << entry_names("r", k, k) << '\n';
    for (std::size_t i = 0; i < t.loglik.size(); ++i) {
        os << i << ',' << io::format_real(t.loglik[i]);
        append_entries(os, t.model_noise[i]);
        append_entries(os, t.obs_noise[i]);
        os << '\n';
    }
    const json params{{"method", "em"},
                      {"model_noise", matrix_json(t.model_noise.back())},
                      {"obs_noise", matrix_json(t.obs_noise.back())},
                      {"loglik", t.loglik.back()}};
    return {{{"trace.csv", os.str()}, {"params.json", dump(params)}},
            json{{"method", "em"}, {"loglik", t.loglik.back()}}.dump()};
}

RunResult learn_mle(const LearnSettings& settings, const StateSpaceModel& model, const ObservationSeries& obs) {
    require(model.linear_dynamics() && model.linear_obs(), ErrorKind::configuration,
            "learn: mle supports linear-Gaussian models");
    learning::KfFamily fam{model, {}};
    const Eigen::Index d = model.dim_state, k = model.dim_obs;
    for (const std::string& b : settings.blocks) {
        if (b == "dynamics") fam.layout.add(b, learning::BlockKind::free, d, d);
        if (b == "obs") fam.layout.add(b, learning::BlockKind::free, k, d);
        if (b == "init_mean") fam.layout.add(b, learning::BlockKind::free, d, 1);
        if (b == "model_noise" || b == "init_cov") fam.layout.add(b, learning::BlockKind::log_cholesky, d, d);
        if (b == "obs_noise") fam.layout.add(b, learning::BlockKind::log_cholesky, k, k);
    }
    learning::MleConfig mc;
    mc.steps = settings.iters;
    const learning::MleResult r = learning::fit_mle_autodiff_kf(fam, obs, fam.encode(model), mc);
    std::ostringstream os;
    os << "iter,loglik," << names("theta", fam.layout.size()) << '\n';
    for (std::size_t i = 0; i < r.trace.values.size(); ++i) {
        os << i << ',' << io::format_real(r.trace.values[i]);
        append_vector(os, r.trace.iterates[i]);
        os << '\n';
    }
    json params{{"method", "mle"}, {"loglik", r.trace.values.back()}, {"message", r.trace.message}};
    for (const std::string& b : settings.blocks) params[b] = matrix_json(r.estimate.get(b));
    return {{{"trace.csv", os.str()}, {"params.json", dump(params)}},
            json{{"method", "mle"}, {"loglik", r.trace.values.back()}}.dump()};
}

// Linear dynamics with every matrix entry free; theta holds A column-major.
learning::DynamicsFamily full_matrix_family(Eigen::Index d) {
    learning::DynamicsFamily f;
    f.params = d * d;
    f.map = [d](const Vector& th, const Vector& v) -> Vector { return th.reshaped(d, d) * v; };
    f.tape_map = [d](const ad::Var& th, const ad::Var& v) { return ad::matvec(ad::reshape(th, int(d), int(d)), v); };
    f.matrix = [d](const Vector& th) -> std::optional<Matrix> { return Matrix(th.reshaped(d, d)); };
    return f;
}

RunResult learn_mcem(const ExperimentConfig& cfg, const LearnSettings& settings, const StateSpaceModel& model,
                     const ObservationSeries& obs) {
    require(model.linear_dynamics(), ErrorKind::configuration,
            "learn: mcem estimates a dynamics matrix and needs a linear model");
    const Eigen::Index d = model.dim_state;
    learning::McEmConfig mc;
    mc.outer = settings.iters;
    mc.inner = settings.inner;
    mc.samples = settings.samples;
    mc.rng = RngStream(cfg.seed).derive("learn.mcem");
    const learning::McEmTrace t = learning::mc_em_run(model, full_matrix_family(d), obs,
                                                      Vector(model.dynamics_matrix->reshaped()), model.model_noise, mc);
    std::ostringstream os;
    os << "iter," << entry_names("a", d, d) << ',' << entry_names("q", d, d) << '\n';
    for (std::size_t i = 0; i < t.theta.size(); ++i) {
        os << i;
        append_entries(os, t.theta[i].reshaped(d, d));
        append_entries(os, t.model_noise[i]);
        os << '\n';
    }
    const json params{{"method", "mcem"},
                      {"dynamics", matrix_json(t.theta.back().reshaped(d, d))},
                      {"model_noise", matrix_json(t.model_noise.back())},
                      {"approximate_e_step", t.approximate_e_step},
                      {"aborted", t.aborted},
                      {"message", t.message}};
    return {{{"trace.csv", os.str()}, {"params.json", dump(params)}},
            json{{"method", "mcem"}, {"aborted", t.aborted}}.dump()};
}

RunResult learn_increment(const LearnSettings& settings, const StateSpaceModel& model, const RunOptions& opts) {
    const Trajectory truth = load_trajectory(opts, *settings.truth);
    require(truth.states.cols() == model.dim_state, ErrorKind::configuration,
            "learn.truth: trajectory width does not match the model");
    const Eigen::Index d = model.dim_state;
    const learning::FeatureBasis basis = settings.basis == "linear"   ? learning::linear_features(d)
                                         : settings.basis == "affine" ? learning::affine_features(d)
                                                                  : learning::quadratic_features(d);
    const auto pairs = learning::increment_pairs(truth, model.dynamics);
    const learning::IncrementCorrection corr = learning::learn_increment_correction(pairs, basis, settings.ridge);
    double before = 0.0, after = 0.0;
    for (const auto& p : pairs) {
        before += p.increment.squaredNorm();
        after += (p.increment - corr(p.state)).squaredNorm();
    }
    const double n = double(pairs.size() * std::size_t(d));
    std::ostringstream os;
    os << "iter," << entry_names("w", corr.weights.rows(), corr.weights.cols()) << '\n' << 0;
    append_entries(os, corr.weights);
    os << '\n';
    const json params{{"method", "increment"},
                      {"basis", settings.basis},
                      {"weights", matrix_json(corr.weights)},
                      {"rms_increment", std::sqrt(before / n)},
                      {"rms_residual", std::sqrt(after / n)}};
    return {{{"trace.csv", os.str()}, {"params.json", dump(params)}},
            json{{"method", "increment"}, {"rms_residual", std::sqrt(after / n)}}.dump()};
}

RunResult learn_gain(const LearnSettings& settings, const StateSpaceModel& model) {
    require(model.linear_dynamics() && model.linear_obs(), ErrorKind::configuration,
            "learn: gain learning needs a linear model");
    const Matrix& a = *model.dynamics_matrix;
    const Matrix& h = *model.obs_matrix;
    learning::GainConfig gc;
    gc.iters = settings.iters;
    const learning::GainResult r =
        learning::learn_fixed_gain(a, h, model.model_noise, model.obs_noise, model.init.cov, settings.horizon, gc);
    const Eigen::Index d = model.dim_state, k = model.dim_obs;
    std::ostringstream os;
    os << "iter,objective," << entry_names("k", d, k) << '\n';
    for (std::size_t i = 0; i < r.trace.values.size(); ++i) {
        os << i << ',' << io::format_real(r.trace.values[i]);
        append_entries(os, r.trace.iterates[i].reshaped(d, k));
        os << '\n';
    }
    json params{{"method", "gain"},
                {"gain", matrix_json(r.gain)},
                {"objective", r.objective},
                {"divergent_trials", r.divergent_trials}};
    try {
        const Matrix steady = filters::steady_state_gain(a, h, model.model_noise, model.obs_noise).gain;
        params["steady_state_gain"] = matrix_json(steady);
        params["distance_to_steady_state"] = (r.gain - steady).norm();
    } catch (const Error&) {
        params["steady_state_gain"] = nullptr;
    }
    return {{{"trace.csv", os.str()}, {"params.json", dump(params)}},
            json{{"method", "gain"}, {"objective", r.objective}}.dump()};
}

RunResult run_learn(const ExperimentConfig& cfg, const RunOptions& opts) {
    const StateSpaceModel model = need_model(cfg, "learn").build();
    const LearnSettings settings = cfg.learn.value_or(LearnSettings{});
    if (settings.method == "increment") return learn_increment(settings, model, opts);
    if (settings.method == "gain") return learn_gain(settings, model);
    const ObservationSeries obs = load_obs(opts, settings.obs);
    check_obs_width(model, obs);
    if (settings.method == "em") return learn_em(cfg, settings, model, obs);
    if (settings.method == "mle") return learn_mle(settings, model, obs);
    return learn_mcem(cfg, settings, model, obs);
}

// --- score ------------------------------------------------------------------

// Groups the rows of a `j,member,x0,...` file into one ensemble per j.
std::vector<std::pair<Eigen::Index, Ensemble>> load_forecasts(const RunOptions& opts, const std::string& path) {
    auto in = open_input(opts, path);
    std::string header;
    std::getline(in, header);
    require(header.rfind("j,member,", 0) == 0, ErrorKind::parse,
            "score.forecast: header must start with 'j,member,'");
    const Matrix rows = io::read_matrix_csv(in, false);
    require(rows.rows() > 0 && rows.cols() >= 3, ErrorKind::parse, "score.forecast: no forecast rows");
    std::vector<std::pair<Eigen::Index, Ensemble>> out;
    Eigen::Index start = 0;
    for (Eigen::Index r = 1; r <= rows.rows(); ++r) {
        if (r < rows.rows() && rows(r, 0) == rows(start, 0)) continue;
        const double j = rows(start, 0);
        require(j >= 0 && j == std::floor(j), ErrorKind::parse, "score.forecast: j must be a non-negative integer");
        require(out.empty() || Eigen::Index(j) > out.back().first, ErrorKind::parse,
                "score.forecast: rows must be grouped by increasing j");
        out.push_back({Eigen::Index(j), Ensemble{rows.block(start, 2, r - start, rows.cols() - 2)}});
        start = r;
    }
    return out;
}

RunResult run_score(const ExperimentConfig& cfg, const RunOptions& opts) {
    const ScoreSettings settings = cfg.score.value_or(ScoreSettings{});
    const auto forecasts = load_forecasts(opts, settings.forecast);
    const Trajectory truth = load_trajectory(opts, settings.truth);
    const Eigen::Index d = forecasts.front().second.dim();
    require(truth.states.cols() == d, ErrorKind::configuration, "score: forecast and truth widths differ");
    for (const auto& [j, e] : forecasts)
        require(j <= truth.steps(), ErrorKind::configuration, "score: forecast time beyond the truth trajectory");

    scoring::ScoreReport report;
    if (settings.rule == "spread_error") {
        std::vector<scoring::Forecast> fs;
        Matrix rows(Eigen::Index(forecasts.size()), d);
        for (std::size_t i = 0; i < forecasts.size(); ++i) {
            fs.emplace_back(forecasts[i].second);
            rows.row(Eigen::Index(i)) = truth.states.row(forecasts[i].first);
        }
        report = scoring::ScoreReport::from_scores("spread_error", {scoring::spread_error_ratio(fs, Trajectory{rows})});
    } else {
        std::vector<double> scores;
        for (const auto& [j, e] : forecasts) {
            const Vector v = truth.state(j);
            if (settings.rule == "energy") {
                scores.push_back(scoring::energy_score(e, v));
            } else {
                double s = 0.0;
                for (Eigen::Index c = 0; c < d; ++c) s += scoring::crps_ensemble(Ensemble{e.members.col(c)}, v(c));
                scores.push_back(s / double(d));
            }
        }
        report = scoring::ScoreReport::from_scores(settings.rule, scores);
    }
    return {{{"score.json", report.to_json() + "\n"}}, json{{"rule", settings.rule}, {"mean", report.mean}}.dump()};
}

// --- mf ---------------------------------------------------------------------

RunResult run_mf(const ExperimentConfig& cfg) {
    require(cfg.mf.has_value(), ErrorKind::configuration, "mf: the configuration needs an mf section");
    const MfSettings& settings = *cfg.mf;
    namespace mf = multifidelity;
    mf::FidelityStats stats;
    stats.sigma_hi = settings.sigma_hi;
    const Eigen::Index L = Eigen::Index(settings.models.size());
    stats.sigma.resize(L);
    stats.rho.resize(L);
    std::vector<double> costs{settings.cost_hi};
    for (Eigen::Index l = 0; l < L; ++l) {
        stats.sigma(l) = settings.models[std::size_t(l)].sigma;
        stats.rho(l) = settings.models[std::size_t(l)].rho;
        costs.push_back(settings.models[std::size_t(l)].cost);
    }
    const mf::AllocationMethod method = settings.method == "enumerate" ? mf::AllocationMethod::enumerate
                                        : settings.method == "relax"   ? mf::AllocationMethod::relax
                                                                   : mf::AllocationMethod::automatic;
    const mf::MfmcPlan plan = mf::mosap_allocate(costs, stats, settings.budget, method);

    std::ostringstream table;
    table << "model,cost,sigma,rho,samples,weight\n";
    table << "hi," << io::format_real(settings.cost_hi) << ',' << io::format_real(settings.sigma_hi) << ",1," << plan.sizes[0]
          << ",1\n";
    for (Eigen::Index l = 0; l < L; ++l) {
        const MfModelSettings& m = settings.models[std::size_t(l)];
        table << m.name << ',' << io::format_real(m.cost) << ',' << io::format_real(m.sigma) << ','
              << io::format_real(m.rho) << ',' << plan.sizes[std::size_t(l + 1)] << ','
              << io::format_real(plan.weights(l)) << '\n';
    }

    const Eigen::Index hi_only = Eigen::Index(std::floor(settings.budget / settings.cost_hi + 1e-12));
    const double hi_var = settings.sigma_hi * settings.sigma_hi / double(std::max<Eigen::Index>(hi_only, 1));
    json report{{"budget", settings.budget},
                {"sizes", plan.sizes},
                {"weights", vector_json(plan.weights)},
                {"enumerated", plan.enumerated},
                {"predicted_variance", plan.variance},
                {"hi_only_samples", hi_only},
                {"hi_only_variance", hi_var},
                {"variance_reduction", 1.0 - plan.variance / hi_var}};

    if (settings.replications > 0) {
        // Synthetic outputs with the configured statistics: hi = sigma_hi z_0
        // and low_l = sigma_l (rho_l z_0 + sqrt(1 - rho_l^2) z_l).
        const VectorMap hi = [s = settings.sigma_hi](const Vector& z) { return Vector::Constant(1, s * z(0)); };
        std::vector<mf::FidelityModel> lows;
        for (Eigen::Index l = 0; l < L; ++l) {
            const double sg = stats.sigma(l), r = stats.rho(l);
            lows.push_back({settings.models[std::size_t(l)].name,
                            [sg, r, l](const Vector& z) {
                                return Vector::Constant(1, sg * (r * z(0) + std::sqrt(1 - r * r) * z(l + 1)));
                            },
                            costs[std::size_t(l + 1)],
                            std::nullopt});
        }
        const RngStream root = RngStream(cfg.seed).derive("mf.replication");
        std::vector<double> est(static_cast<std::size_t>(settings.replications));
        for (int r = 0; r < settings.replications; ++r) {
            RngStream rng = root.derive(std::uint64_t(r));
            Matrix inputs(plan.sizes.back(), L + 1);
            for (Eigen::Index n = 0; n < inputs.rows(); ++n) inputs.row(n) = rng.normal_vector(L + 1).transpose();
            est[std::size_t(r)] = mf::mfmc_mean(hi, lows, plan, inputs).mean(0);
        }
        double mean = 0.0, var = 0.0;
        for (double e : est) mean += e / double(est.size());
        for (double e : est) var += (e - mean) * (e - mean);
        var = est.size() > 1 ? var / double(est.size() - 1) : 0.0;
        report["replications"] = {{"count", settings.replications},
                                  {"mean", mean},
                                  {"empirical_variance", var},
                                  {"variance_ratio", plan.variance > 0 ? var / plan.variance : 0.0}};
    }
    return {{{"allocation.csv", table.str()}, {"report.json", dump(report)}},
            json{{"predicted_variance", plan.variance}, {"variance_reduction", 1.0 - plan.variance / hi_var}}.dump()};
}

// --- invert -----------------------------------------------------------------

RunResult run_invert(const ExperimentConfig& cfg, const RunOptions& opts) {
    require(cfg.invert.has_value(), ErrorKind::configuration, "invert: the configuration needs an invert section");
    const InvertSettings& settings = *cfg.invert;
    VectorMap forward;
    Vector y;
    Eigen::Index dim = 0;
    Gaussian prior;
    if (settings.forward == "linear") {
        Matrix g;
        if (settings.matrix) {
            g = *settings.matrix;
        } else {
            auto in = open_input(opts, *settings.matrix_file);
            g = io::read_matrix_csv(in, false);
        }
        auto in = open_input(opts, settings.data);
        const Matrix data = io::read_matrix_csv(in, false);
        y = data.transpose().reshaped();  // row by row
        require(g.rows() == y.size(), ErrorKind::configuration,
                "invert: the forward matrix has " + std::to_string(g.rows()) + " rows but the data has " +
                    std::to_string(y.size()) + " values");
        forward = [g](const Vector& u) -> Vector { return g * u; };
        dim = g.cols();
        prior = Gaussian{Vector::Zero(dim), Matrix::Identity(dim, dim)};
    } else {
        const StateSpaceModel model = need_model(cfg, "invert").build();
        const ObservationSeries obs = load_obs(opts, settings.data);
        check_obs_width(model, obs);
        y = obs.obs.transpose().reshaped();
        const Eigen::Index steps = obs.steps();
        forward = [model, steps](const Vector& u) -> Vector {
            Vector out(steps * model.dim_obs);
            Vector v = u;
            for (Eigen::Index j = 0; j < steps; ++j) {
                v = model.dynamics(v);
                out.segment(j * model.dim_obs, model.dim_obs) = model.obs_map(v);
            }
            return out;
        };
        dim = model.dim_state;
        prior = model.init;
    }
    if (settings.prior_mean) prior.mean = *settings.prior_mean;
    if (settings.prior_cov) prior.cov = *settings.prior_cov;
    require(prior.mean.size() == dim && prior.cov.rows() == dim, ErrorKind::configuration,
            "invert: prior size does not match the unknown (" + std::to_string(dim) + ")");

    optimize::EkiConfig ec;
    ec.iters = settings.iters;
    ec.rng = RngStream(cfg.seed).derive("invert");
    ec.discrepancy_stop = settings.discrepancy_stop;
    const Matrix gamma = settings.gamma * Matrix::Identity(y.size(), y.size());
    const optimize::EkiTrace t = optimize::eki_run(forward, y, gamma, prior, settings.ensemble_size, ec);

    std::ostringstream os;
    os << "iter,misfit," << names("u", dim) << '\n';
    for (std::size_t i = 0; i < t.ensembles.size(); ++i) {
        os << i << ',' << io::format_real(t.mean_misfit[i]);
        append_vector(os, ensemble_moments(t.ensembles[i]).first);
        os << '\n';
    }
    const auto [mean, cov] = ensemble_moments(t.ensembles.back());
    const json result{{"mean", vector_json(mean)},
                      {"cov", matrix_json(cov)},
                      {"misfit", t.mean_misfit.back()},
                      {"iterations", t.iterations()},
                      {"stopped_by_discrepancy", t.stopped_by_discrepancy}};
    return {{{"trace.csv", os.str()}, {"result.json", dump(result)}},
            json{{"misfit", t.mean_misfit.back()}, {"iterations", t.iterations()}}.dump()};
}

// --- bench ------------------------------------------------------------------

RunResult run_bench(const ExperimentConfig& cfg) {
    const StateSpaceModel model = need_model(cfg, "bench").build();
    const BenchSettings settings = cfg.bench.value_or(BenchSettings{});
    const RngStream root(cfg.seed);
    const auto [truth, obs] = simulate(model, settings.steps, root.derive("bench.data"));
    std::vector<std::string> algorithms;
    if (model.linear_dynamics() && model.linear_obs()) algorithms.push_back("kf");
    if (model.linear_obs()) algorithms.push_back("exkf");
    algorithms.push_back("enkf");
    algorithms.push_back("bpf");
    json timings = json::object();
    for (const std::string& alg : algorithms) {
        FilterSettings fs;
        fs.algorithm = alg;
        fs.ensemble_size = settings.ensemble_size;
        std::vector<double> secs;
        double err = 0.0;
        for (int r = 0; r < settings.repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            const filters::FilterTrace tr = run_filter_algorithm(fs, model, obs, root.derive("bench.filter"));
            secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
            err = rmse(tr.mean, truth.states.bottomRows(obs.steps()));
        }
        std::sort(secs.begin(), secs.end());
        timings[alg] = {{"min_seconds", secs.front()}, {"median_seconds", secs[secs.size() / 2]}, {"rmse", err}};
    }
    const json report{{"steps", settings.steps}, {"ensemble_size", settings.ensemble_size}, {"timings", timings}};
    return {{{"bench.json", dump(report)}}, json{{"algorithms", algorithms}}.dump()};
}

}  // namespace

RunResult run(const std::string& command, const ExperimentConfig& cfg, const RunOptions& opts) {
    if (command == "generate") return run_generate(cfg);
    if (command == "filter") return run_filter(cfg, opts);
    if (command == "smooth") return run_smooth(cfg, opts);
    if (command == "learn") return run_learn(cfg, opts);
    if (command == "score") return run_score(cfg, opts);
    if (command == "mf") return run_mf(cfg);
    if (command == "invert") return run_invert(cfg, opts);
    if (command == "bench") return run_bench(cfg);
    fail(ErrorKind::argument, "unknown command '" + command + "'");
}

}  // namespace dakit::experiment
