#include "dakit/experiment.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

namespace dakit::experiment {

using nlohmann::json;

namespace {

std::string join_violations(const std::vector<std::string>& v) {
    std::string out = "invalid configuration (" + std::to_string(v.size()) + " problem" + (v.size() == 1 ? "" : "s") +
                      ")";
    for (const std::string& s : v) out += "\n  " + s;
    return out;
}

// Reads the fields of one JSON object, remembering which keys were consumed
// so that everything else can be reported as unknown.
class Fields {
public:
    Fields(const json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) error("", "expected an object");
    }

    bool valid() const { return j_.is_object(); }
    const std::string& path() const { return path_; }

    void error(const std::string& key, const std::string& message) const {
        std::string where = path_;
        if (!key.empty()) where += (where.empty() ? "" : ".") + key;
        errors_.push_back((where.empty() ? "<root>" : where) + ": " + message);
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        if (!valid()) return nullptr;
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    bool has(const std::string& key) const { return valid() && j_.contains(key); }

    void finish() const {
        if (!valid()) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) error(it.key(), "unknown key");
    }

    std::string child_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void real(const std::string& key, double& out, const std::function<bool(double)>& ok = {},
              const char* rule = nullptr) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_number() || !std::isfinite(v->get<double>())) return error(key, "expected a finite number");
        const double x = v->get<double>();
        if (ok && !ok(x)) return error(key, std::string("must be ") + rule);
        out = x;
    }

    void optional_real(const std::string& key, std::optional<double>& out, const std::function<bool(double)>& ok,
                       const char* rule) {
        if (!has(key)) {
            find(key);
            return;
        }
        double x = 0.0;
        const std::size_t before = errors_.size();
        real(key, x, ok, rule);
        if (errors_.size() == before) out = x;
    }

    void integer(const std::string& key, int& out, int min) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_number_integer()) return error(key, "expected an integer");
        const long long x = v->get<long long>();
        if (x < min || x > 100'000'000) return error(key, "must be an integer in [" + std::to_string(min) + ", 1e8]");
        out = int(x);
    }

    void unsigned64(const std::string& key, std::uint64_t& out) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_number_unsigned()) return error(key, "expected a non-negative integer");
        out = v->get<std::uint64_t>();
    }

    void boolean(const std::string& key, bool& out) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_boolean()) return error(key, "expected true or false");
        out = v->get<bool>();
    }

    void text(const std::string& key, std::string& out, const std::vector<std::string>& allowed = {}) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_string() || v->get<std::string>().empty()) return error(key, "expected a non-empty string");
        const std::string s = v->get<std::string>();
        if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
            std::string list;
            for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
            return error(key, "must be one of: " + list);
        }
        out = s;
    }

    void optional_text(const std::string& key, std::optional<std::string>& out) {
        if (!has(key)) {
            find(key);
            return;
        }
        std::string s;
        const std::size_t before = errors_.size();
        text(key, s);
        if (errors_.size() == before) out = s;
    }

    void text_list(const std::string& key, std::vector<std::string>& out, const std::vector<std::string>& allowed) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_array() || v->empty()) return error(key, "expected a non-empty array of strings");
        std::vector<std::string> items;
        for (const json& e : *v) {
            if (!e.is_string() || std::find(allowed.begin(), allowed.end(), e.get<std::string>()) == allowed.end())
                return error(key, "contains an unsupported entry");
            if (std::find(items.begin(), items.end(), e.get<std::string>()) != items.end())
                return error(key, "lists an entry twice");
            items.push_back(e.get<std::string>());
        }
        out = items;
    }

    // A matrix is an array of equal-length rows; a bare number means 1 x 1.
    bool matrix(const std::string& key, Matrix& out) {
        const json* v = find(key);
        if (!v) return false;
        if (v->is_number()) {
            out = Matrix::Constant(1, 1, v->get<double>());
            if (!std::isfinite(out(0, 0))) error(key, "entries must be finite numbers");
            return std::isfinite(out(0, 0));
        }
        if (!v->is_array() || v->empty() || !(*v)[0].is_array() || (*v)[0].empty()) {
            error(key, "expected a non-empty array of rows");
            return false;
        }
        const std::size_t cols = (*v)[0].size();
        Matrix m(Eigen::Index(v->size()), Eigen::Index(cols));
        for (std::size_t r = 0; r < v->size(); ++r) {
            const json& row = (*v)[r];
            if (!row.is_array() || row.size() != cols) {
                error(key, "rows must all have " + std::to_string(cols) + " entries");
                return false;
            }
            for (std::size_t c = 0; c < cols; ++c) {
                if (!row[c].is_number() || !std::isfinite(row[c].get<double>())) {
                    error(key, "entries must be finite numbers");
                    return false;
                }
                m(Eigen::Index(r), Eigen::Index(c)) = row[c].get<double>();
            }
        }
        out = std::move(m);
        return true;
    }

    void optional_matrix(const std::string& key, std::optional<Matrix>& out) {
        Matrix m;
        if (matrix(key, m)) out = std::move(m);
    }

    bool vector(const std::string& key, Vector& out) {
        const json* v = find(key);
        if (!v) return false;
        if (v->is_number()) {
            out = Vector::Constant(1, v->get<double>());
            return true;
        }
        if (!v->is_array() || v->empty()) {
            error(key, "expected a non-empty array of numbers");
            return false;
        }
        Vector x(Eigen::Index(v->size()));
        for (std::size_t i = 0; i < v->size(); ++i) {
            if (!(*v)[i].is_number() || !std::isfinite((*v)[i].get<double>())) {
                error(key, "entries must be finite numbers");
                return false;
            }
            x(Eigen::Index(i)) = (*v)[i].get<double>();
        }
        out = std::move(x);
        return true;
    }

    void optional_vector(const std::string& key, std::optional<Vector>& out) {
        Vector v;
        if (vector(key, v)) out = std::move(v);
    }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

bool positive(double x) { return x > 0.0; }
bool nonnegative(double x) { return x >= 0.0; }

void check_shape(const Fields& f, const std::string& key, const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
    if (m.size() == 0) return;
    if (m.rows() != rows || m.cols() != cols)
        f.error(key, "expected shape " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
}

// Covariance checks: symmetric, and PSD or PD as requested.
void check_cov(const Fields& f, const std::string& key, const Matrix& m, bool definite) {
    if (m.size() == 0 || m.rows() != m.cols()) return;
    if (!is_symmetric(m, 1e-12)) return f.error(key, "covariance must be symmetric");
    const double lo = min_eigenvalue_sym(m);
    const double scale = std::max(1.0, m.diagonal().cwiseAbs().maxCoeff());
    if (definite ? lo <= 1e-12 * scale : lo < -1e-10 * scale) {
        std::ostringstream os;
        os << "covariance must be positive " << (definite ? "definite" : "semidefinite") << " (smallest eigenvalue "
           << lo << ")";
        f.error(key, os.str());
    }
}

ModelSettings parse_model(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "model", errors);
    ModelSettings m;
    f.text("kind", m.kind, {"linear", "lorenz63"});
    const bool lorenz = m.kind == "lorenz63";
    const bool has_dyn = f.matrix("dynamics", m.dynamics);
    if (lorenz && has_dyn) f.error("dynamics", "not used by the lorenz63 model");
    if (!lorenz && !has_dyn && f.valid() && !f.has("dynamics")) f.error("dynamics", "required for a linear model");
    const bool has_obs = f.matrix("obs", m.obs);
    if (!has_obs && !lorenz && f.valid() && !f.has("obs")) f.error("obs", "required for a linear model");
    if (!f.matrix("model_noise", m.model_noise) && f.valid() && !f.has("model_noise"))
        f.error("model_noise", "required");
    if (!f.matrix("obs_noise", m.obs_noise) && f.valid() && !f.has("obs_noise")) f.error("obs_noise", "required");
    f.vector("init_mean", m.init_mean);
    f.matrix("init_cov", m.init_cov);
    f.real("tau", m.tau, positive, "positive");
    f.real("dt", m.dt, positive, "positive");
    f.finish();

    const Eigen::Index d = lorenz ? 3 : m.dynamics.rows();
    if (!lorenz && m.dynamics.size() > 0) check_shape(f, "dynamics", m.dynamics, d, d);
    if (lorenz && m.obs.size() == 0) m.obs = Matrix::Identity(3, 3);
    if (lorenz && std::abs(m.tau / m.dt - std::round(m.tau / m.dt)) > 1e-9 * (m.tau / m.dt))
        f.error("tau", "must be a whole number of dt steps");
    if (d == 0) return m;
    if (m.obs.size() > 0 && m.obs.cols() != d) check_shape(f, "obs", m.obs, m.obs.rows(), d);
    const Eigen::Index k = m.obs.rows();
    check_shape(f, "model_noise", m.model_noise, d, d);
    check_cov(f, "model_noise", m.model_noise, false);
    if (k > 0) check_shape(f, "obs_noise", m.obs_noise, k, k);
    check_cov(f, "obs_noise", m.obs_noise, true);
    if (m.init_mean.size() == 0) m.init_mean = Vector::Zero(d);
    if (m.init_cov.size() == 0) m.init_cov = Matrix::Identity(d, d);
    if (m.init_mean.size() != d)
        f.error("init_mean", "expected length " + std::to_string(d) + ", got " + std::to_string(m.init_mean.size()));
    check_shape(f, "init_cov", m.init_cov, d, d);
    check_cov(f, "init_cov", m.init_cov, false);
    return m;
}

GenerateSettings parse_generate(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "generate", errors);
    GenerateSettings s;
    f.integer("steps", s.steps, 1);
    f.finish();
    return s;
}

FilterSettings parse_filter(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "filter", errors);
    FilterSettings s;
    f.text("algorithm", s.algorithm, {"kf", "3dvar", "exkf", "enkf", "bpf", "opf"});
    f.text("obs", s.obs);
    f.optional_text("truth", s.truth);
    f.integer("ensemble_size", s.ensemble_size, 2);
    f.real("inflation", s.inflation, [](double x) { return x >= 1.0; }, "at least 1");
    f.optional_real("loc_length", s.loc_length, positive, "positive");
    f.boolean("stochastic", s.stochastic);
    f.optional_matrix("gain", s.gain);
    f.real("resample_threshold", s.resample_threshold, [](double x) { return x >= 0.0 && x <= 1.0; }, "in [0, 1]");
    f.finish();
    return s;
}

SmoothSettings parse_smooth(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "smooth", errors);
    SmoothSettings s;
    f.text("mode", s.mode, {"weak", "strong"});
    f.text("obs", s.obs);
    f.text("init", s.init, {"freerun", "truth-file"});
    f.optional_text("truth", s.truth);
    f.real("tol", s.tol, positive, "positive");
    f.integer("max_iter", s.max_iter, 1);
    f.finish();
    if (s.init == "truth-file" && !s.truth) f.error("truth", "required when init is truth-file");
    return s;
}

LearnSettings parse_learn(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "learn", errors);
    LearnSettings s;
    f.text("method", s.method, {"em", "mcem", "mle", "increment", "gain"});
    f.text("obs", s.obs);
    f.optional_text("truth", s.truth);
    f.integer("iters", s.iters, 1);
    f.integer("samples", s.samples, 0);
    f.integer("inner", s.inner, 0);
    f.text_list("blocks", s.blocks, {"dynamics", "obs", "model_noise", "obs_noise", "init_mean", "init_cov"});
    f.text("basis", s.basis, {"linear", "affine", "quadratic"});
    f.real("ridge", s.ridge, nonnegative, "non-negative");
    f.integer("horizon", s.horizon, 1);
    f.finish();
    if (s.method == "increment" && !s.truth) f.error("truth", "required by the increment method");
    if (s.method == "mcem" && s.samples < 1) f.error("samples", "mcem needs at least one sample per E-step");
    return s;
}

ScoreSettings parse_score(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "score", errors);
    ScoreSettings s;
    f.text("forecast", s.forecast);
    f.text("truth", s.truth);
    f.text("rule", s.rule, {"crps", "energy", "spread_error"});
    f.finish();
    return s;
}

MfSettings parse_mf(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "mf", errors);
    MfSettings s;
    f.real("cost_hi", s.cost_hi, positive, "positive");
    f.real("sigma_hi", s.sigma_hi, positive, "positive");
    if (const json* models = f.find("models")) {
        if (!models->is_array()) {
            f.error("models", "expected an array of model objects");
        } else {
            for (std::size_t i = 0; i < models->size(); ++i) {
                Fields m((*models)[i], f.child_path("models[" + std::to_string(i) + "]"), errors);
                MfModelSettings settings;
                settings.name = "low" + std::to_string(i + 1);
                m.text("name", settings.name);
                m.real("cost", settings.cost, positive, "positive");
                m.real("sigma", settings.sigma, positive, "positive");
                m.real("rho", settings.rho, [](double x) { return std::abs(x) <= 1.0; }, "in [-1, 1]");
                m.finish();
                s.models.push_back(settings);
            }
        }
    }
    f.real("budget", s.budget, positive, "positive");
    f.integer("replications", s.replications, 0);
    f.text("method", s.method, {"automatic", "enumerate", "relax"});
    f.finish();
    return s;
}

InvertSettings parse_invert(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "invert", errors);
    InvertSettings s;
    f.text("forward", s.forward, {"linear", "lorenz-obs"});
    f.optional_matrix("matrix", s.matrix);
    f.optional_text("matrix_file", s.matrix_file);
    f.text("data", s.data);
    f.real("gamma", s.gamma, positive, "positive");
    f.integer("ensemble_size", s.ensemble_size, 2);
    f.integer("iters", s.iters, 0);
    f.optional_vector("prior_mean", s.prior_mean);
    f.optional_matrix("prior_cov", s.prior_cov);
    f.boolean("discrepancy_stop", s.discrepancy_stop);
    f.finish();
    if (s.forward == "linear" && !s.matrix == !s.matrix_file)
        f.error("matrix", "the linear forward map needs exactly one of matrix or matrix_file");
    if (s.prior_cov) check_cov(f, "prior_cov", *s.prior_cov, false);
    if (s.prior_mean && s.prior_cov && s.prior_cov->rows() != s.prior_mean->size())
        f.error("prior_cov", "size does not match prior_mean");
    return s;
}

BenchSettings parse_bench(const json& j, std::vector<std::string>& errors) {
    Fields f(j, "bench", errors);
    BenchSettings s;
    f.integer("steps", s.steps, 1);
    f.integer("ensemble_size", s.ensemble_size, 2);
    f.integer("repeats", s.repeats, 1);
    f.finish();
    return s;
}

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

json vector_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

template <class T, class F>
void put_optional(json& j, const char* key, const std::optional<T>& v, F conv) {
    if (v) j[key] = conv(*v);
}

const auto same = [](const auto& x) { return x; };

}  // namespace

ConfigError::ConfigError(std::vector<std::string> violations)
    : Error(ErrorKind::parse, join_violations(violations)), violations_(std::move(violations)) {}

StateSpaceModel ModelSettings::build() const {
    const Gaussian init{init_mean, init_cov};
    if (kind == "lorenz63") return make_lorenz63_model(obs, model_noise, obs_noise, init, tau, dt);
    return make_linear_model(dynamics, obs, model_noise, obs_noise, init);
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"generate", "filter", "smooth", "learn",
                                                "score",    "mf",     "invert", "bench"};
    return names;
}

bool is_command(const std::string& name) {
    const auto& n = command_names();
    return std::find(n.begin(), n.end(), name) != n.end();
}

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError({std::string("<root>: not valid JSON (") + e.what() + ")"});
    }
    std::vector<std::string> errors;
    ExperimentConfig cfg;
    Fields root(j, "", errors);
    root.unsigned64("seed", cfg.seed);
    if (const json* v = root.find("model")) cfg.model = parse_model(*v, errors);
    if (const json* v = root.find("generate")) cfg.generate = parse_generate(*v, errors);
    if (const json* v = root.find("filter")) cfg.filter = parse_filter(*v, errors);
    if (const json* v = root.find("smooth")) cfg.smooth = parse_smooth(*v, errors);
    if (const json* v = root.find("learn")) cfg.learn = parse_learn(*v, errors);
    if (const json* v = root.find("score")) cfg.score = parse_score(*v, errors);
    if (const json* v = root.find("mf")) cfg.mf = parse_mf(*v, errors);
    if (const json* v = root.find("invert")) cfg.invert = parse_invert(*v, errors);
    if (const json* v = root.find("bench")) cfg.bench = parse_bench(*v, errors);
    root.finish();
    if (!errors.empty()) throw ConfigError(std::move(errors));
    return cfg;
}

std::string emit_config(const ExperimentConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    if (const auto& m = cfg.model) {
        json o;
        o["kind"] = m->kind;
        if (m->kind == "linear") o["dynamics"] = matrix_json(m->dynamics);
        if (m->obs.size()) o["obs"] = matrix_json(m->obs);
        o["model_noise"] = matrix_json(m->model_noise);
        o["obs_noise"] = matrix_json(m->obs_noise);
        o["init_mean"] = vector_json(m->init_mean);
        o["init_cov"] = matrix_json(m->init_cov);
        if (m->kind == "lorenz63") {
            o["tau"] = m->tau;
            o["dt"] = m->dt;
        }
        j["model"] = o;
    }
    if (const auto& s = cfg.generate) j["generate"] = {{"steps", s->steps}};
    if (const auto& s = cfg.filter) {
        json o{{"algorithm", s->algorithm}, {"obs", s->obs},         {"ensemble_size", s->ensemble_size},
               {"inflation", s->inflation}, {"stochastic", s->stochastic}, {"resample_threshold", s->resample_threshold}};
        put_optional(o, "truth", s->truth, same);
        put_optional(o, "loc_length", s->loc_length, same);
        put_optional(o, "gain", s->gain, matrix_json);
        j["filter"] = o;
    }
    if (const auto& s = cfg.smooth) {
        json o{{"mode", s->mode}, {"obs", s->obs}, {"init", s->init}, {"tol", s->tol}, {"max_iter", s->max_iter}};
        put_optional(o, "truth", s->truth, same);
        j["smooth"] = o;
    }
    if (const auto& s = cfg.learn) {
        json o{{"method", s->method}, {"obs", s->obs},     {"iters", s->iters}, {"samples", s->samples},
               {"inner", s->inner},   {"blocks", s->blocks}, {"basis", s->basis}, {"ridge", s->ridge},
               {"horizon", s->horizon}};
        put_optional(o, "truth", s->truth, same);
        j["learn"] = o;
    }
    if (const auto& s = cfg.score) j["score"] = {{"forecast", s->forecast}, {"truth", s->truth}, {"rule", s->rule}};
    if (const auto& s = cfg.mf) {
        json models = json::array();
        for (const MfModelSettings& m : s->models)
            models.push_back({{"name", m.name}, {"cost", m.cost}, {"sigma", m.sigma}, {"rho", m.rho}});
        j["mf"] = {{"cost_hi", s->cost_hi}, {"sigma_hi", s->sigma_hi},         {"models", models},
                   {"budget", s->budget},   {"replications", s->replications}, {"method", s->method}};
    }
    if (const auto& s = cfg.invert) {
        json o{{"forward", s->forward},
               {"data", s->data},
               {"gamma", s->gamma},
               {"ensemble_size", s->ensemble_size},
               {"iters", s->iters},
               {"discrepancy_stop", s->discrepancy_stop}};
        put_optional(o, "matrix", s->matrix, matrix_json);
        put_optional(o, "matrix_file", s->matrix_file, same);
        put_optional(o, "prior_mean", s->prior_mean, vector_json);
        put_optional(o, "prior_cov", s->prior_cov, matrix_json);
        j["invert"] = o;
    }
    if (const auto& s = cfg.bench)
        j["bench"] = {{"steps", s->steps}, {"ensemble_size", s->ensemble_size}, {"repeats", s->repeats}};
    return j.dump(2) + "\n";
}

}  // namespace dakit::experiment
