#pragma once

// Batch experiments: a validated JSON configuration, and one runner per
// command that turns it into named text artifacts (CSV and JSON).

#include "dakit/core.hpp"
#include "dakit/error.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dakit::experiment {

// Raised by parse_config with every schema violation found, each prefixed
// by the path of the offending field (e.g. "model.obs_noise: ...").
class ConfigError : public Error {
public:
    explicit ConfigError(std::vector<std::string> violations);
    const std::vector<std::string>& violations() const noexcept { return violations_; }

private:
    std::vector<std::string> violations_;
};

struct ModelSettings {
    std::string kind = "linear";  // linear | lorenz63
    Matrix dynamics;              // linear only
    Matrix obs;                   // k x d; lorenz63 defaults to the identity
    Matrix model_noise;
    Matrix obs_noise;
    Vector init_mean;             // defaults to zeros
    Matrix init_cov;              // defaults to the identity
    double tau = 0.1;             // lorenz63 assimilation window
    double dt = 0.01;             // lorenz63 integration step

    Eigen::Index dim_state() const { return kind == "lorenz63" ? 3 : dynamics.rows(); }
    StateSpaceModel build() const;
};

struct GenerateSettings {
    int steps = 100;
};

struct FilterSettings {
    std::string algorithm = "kf";  // kf | 3dvar | exkf | enkf | bpf | opf
    std::string obs = "observations.csv";
    std::optional<std::string> truth;  // adds an RMSE to the summary
    int ensemble_size = 100;
    double inflation = 1.0;
    // Gaussian localization length over |i - j| state-index distance (enkf).
    std::optional<double> loc_length;
    bool stochastic = false;        // 3dvar forecast noise
    std::optional<Matrix> gain;     // 3dvar; defaults to the steady-state gain
    double resample_threshold = 0.5;
};

struct SmoothSettings {
    std::string mode = "weak";      // weak | strong
    std::string obs = "observations.csv";
    std::string init = "freerun";   // freerun | truth-file
    std::optional<std::string> truth;
    double tol = 1e-9;
    int max_iter = 200;
};

struct LearnSettings {
    std::string method = "em";      // em | mcem | mle | increment | gain
    std::string obs = "observations.csv";
    std::optional<std::string> truth;  // increment: the reference trajectory
    int iters = 30;
    int samples = 0;                // em: 0 = exact E-step; mcem: draws per E-step
    int inner = 5;                  // mcem gradient steps per M-step
    // mle: model blocks to estimate (dynamics, obs, model_noise, obs_noise,
    // init_mean, init_cov).
    std::vector<std::string> blocks{"dynamics"};
    std::string basis = "affine";   // increment: linear | affine | quadratic
    double ridge = 0.0;
    int horizon = 500;              // gain: steps of the covariance recursion
};

struct ScoreSettings {
    // Ensemble forecasts with header `j,member,x0,...`, one row per member.
    std::string forecast = "forecast.csv";
    std::string truth = "truth.csv";
    std::string rule = "crps";      // crps | energy | spread_error
};

struct MfModelSettings {
    std::string name;
    double cost = 1.0;
    double sigma = 1.0;
    double rho = 0.0;
};

struct MfSettings {
    double cost_hi = 1.0;
    double sigma_hi = 1.0;
    std::vector<MfModelSettings> models;
    double budget = 100.0;
    // When positive, a synthetic Gaussian replication study checks the
    // predicted variance.
    int replications = 0;
    std::string method = "automatic";  // automatic | enumerate | relax
};

struct InvertSettings {
    std::string forward = "linear";   // linear | lorenz-obs
    std::optional<Matrix> matrix;     // linear: G inline
    std::optional<std::string> matrix_file;
    std::string data = "data.csv";
    double gamma = 0.01;              // observation noise variance
    int ensemble_size = 50;
    int iters = 10;
    std::optional<Vector> prior_mean;
    std::optional<Matrix> prior_cov;
    bool discrepancy_stop = false;
};

struct BenchSettings {
    int steps = 200;
    int ensemble_size = 200;
    int repeats = 3;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::optional<ModelSettings> model;
    std::optional<GenerateSettings> generate;
    std::optional<FilterSettings> filter;
    std::optional<SmoothSettings> smooth;
    std::optional<LearnSettings> learn;
    std::optional<ScoreSettings> score;
    std::optional<MfSettings> mf;
    std::optional<InvertSettings> invert;
    std::optional<BenchSettings> bench;
};

// Parses and validates; unknown keys, wrong types, bad enum values,
// non-positive-definite covariances and shape mismatches are all reported
// together in one ConfigError.
ExperimentConfig parse_config(const std::string& json_text);

// Canonical JSON with every default filled in; parse_config(emit_config(c))
// emits the same bytes.
std::string emit_config(const ExperimentConfig& cfg);

const std::vector<std::string>& command_names();
bool is_command(const std::string& name);

struct Artifact {
    std::string name;
    std::string content;
};

struct RunResult {
    std::vector<Artifact> artifacts;
    std::string summary_json;  // small JSON object with headline numbers
};

struct RunOptions {
    // Relative input paths in the configuration are resolved against this.
    std::string base_dir = ".";
};

RunResult run(const std::string& command, const ExperimentConfig& cfg, const RunOptions& opts = {});

}  // namespace dakit::experiment
