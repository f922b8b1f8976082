#include "dakit/dakit.h"

#include "dakit/core.hpp"
#include "dakit/experiment.hpp"
#include "dakit/filters.hpp"
#include "dakit/multifidelity.hpp"
#include "dakit/parallel.hpp"
#include "dakit/scoring.hpp"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>
#include <thread>
#include <vector>

struct dakit_matrix {
    dakit::Matrix value;
};

struct dakit_model {
    dakit::StateSpaceModel value;
};

struct dakit_result {
    dakit::experiment::RunResult value;
};

namespace {

struct LastError {
    std::string message;
    std::vector<std::string> details;
};

thread_local LastError g_last;

dakit_status record(dakit_status status, std::string message, std::vector<std::string> details = {}) {
    g_last.message = std::move(message);
    g_last.details = std::move(details);
    return status;
}

// Runs `body`, translating exceptions into a status and the thread's last
// error. The numeric values of ErrorKind and dakit_status coincide.
template <class F>
dakit_status guarded(F&& body) {
    try {
        body();
        return DAKIT_OK;
    } catch (const dakit::experiment::ConfigError& e) {
        return record(DAKIT_E_PARSE, e.what(), e.violations());
    } catch (const dakit::Error& e) {
        return record(static_cast<dakit_status>(e.kind()), e.what());
    } catch (const std::bad_alloc&) {
        return record(DAKIT_E_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return record(DAKIT_E_INTERNAL, e.what());
    } catch (...) {
        return record(DAKIT_E_INTERNAL, "unknown failure");
    }
}

void need(const void* p, const char* what) {
    dakit::require(p != nullptr, dakit::ErrorKind::argument, std::string(what) + " must not be NULL");
}

dakit_matrix* wrap(dakit::Matrix m) { return new dakit_matrix{std::move(m)}; }

char* duplicate(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

dakit::Gaussian initial(const dakit_matrix* mean, const dakit_matrix* cov) {
    need(mean, "init_mean");
    need(cov, "init_cov");
    dakit::require(mean->value.cols() == 1, dakit::ErrorKind::argument, "init_mean must be a column (d x 1)");
    return dakit::Gaussian{mean->value.col(0), cov->value};
}

}  // namespace

extern "C" {

const char* dakit_version(void) { return DAKIT_VERSION; }

const char* dakit_status_name(dakit_status status) {
    switch (status) {
    case DAKIT_OK:
        return "ok";
    case DAKIT_E_INTERNAL:
        return "internal";
    default:
        if (status >= DAKIT_E_ARGUMENT && status <= DAKIT_E_IO)
            return dakit::to_string(static_cast<dakit::ErrorKind>(status));
        return "unknown";
    }
}

const char* dakit_last_error(void) { return g_last.message.c_str(); }

size_t dakit_last_error_detail_count(void) { return g_last.details.size(); }

const char* dakit_last_error_detail(size_t index) {
    return index < g_last.details.size() ? g_last.details[index].c_str() : nullptr;
}

void dakit_string_free(char* s) { std::free(s); }

dakit_status dakit_set_threads(int threads) {
    return guarded([&] {
        dakit::require(threads >= 0, dakit::ErrorKind::argument, "thread count must be non-negative");
        const int hw = static_cast<int>(std::thread::hardware_concurrency());
        dakit::set_thread_count(threads == 0 ? std::max(1, hw) : threads);
    });
}

int dakit_get_threads(void) { return dakit::thread_count(); }

dakit_status dakit_matrix_create(size_t rows, size_t cols, const double* data, dakit_matrix** out) {
    return guarded([&] {
        need(out, "out");
        *out = nullptr;
        dakit::Matrix m = dakit::Matrix::Zero(Eigen::Index(rows), Eigen::Index(cols));
        if (data != nullptr)
            for (size_t i = 0; i < rows; ++i)
                for (size_t j = 0; j < cols; ++j) m(Eigen::Index(i), Eigen::Index(j)) = data[i * cols + j];
        *out = wrap(std::move(m));
    });
}

void dakit_matrix_destroy(dakit_matrix* m) { delete m; }

size_t dakit_matrix_rows(const dakit_matrix* m) { return m ? size_t(m->value.rows()) : 0; }

size_t dakit_matrix_cols(const dakit_matrix* m) { return m ? size_t(m->value.cols()) : 0; }

dakit_status dakit_matrix_get(const dakit_matrix* m, size_t row, size_t col, double* out) {
    return guarded([&] {
        need(m, "matrix");
        need(out, "out");
        dakit::require(row < size_t(m->value.rows()) && col < size_t(m->value.cols()), dakit::ErrorKind::argument,
                       "matrix index out of range");
        *out = m->value(Eigen::Index(row), Eigen::Index(col));
    });
}

dakit_status dakit_matrix_copy(const dakit_matrix* m, double* out) {
    return guarded([&] {
        need(m, "matrix");
        need(out, "out");
        const auto& v = m->value;
        for (Eigen::Index i = 0; i < v.rows(); ++i)
            for (Eigen::Index j = 0; j < v.cols(); ++j) out[i * v.cols() + j] = v(i, j);
    });
}

dakit_status dakit_model_linear_create(const dakit_matrix* dynamics, const dakit_matrix* obs,
                                       const dakit_matrix* model_noise, const dakit_matrix* obs_noise,
                                       const dakit_matrix* init_mean, const dakit_matrix* init_cov,
                                       dakit_model** out) {
    return guarded([&] {
        need(out, "out");
        *out = nullptr;
        need(dynamics, "dynamics");
        need(obs, "obs");
        need(model_noise, "model_noise");
        need(obs_noise, "obs_noise");
        *out = new dakit_model{dakit::make_linear_model(dynamics->value, obs->value, model_noise->value,
                                                        obs_noise->value, initial(init_mean, init_cov))};
    });
}

dakit_status dakit_model_lorenz63_create(const dakit_matrix* obs, const dakit_matrix* model_noise,
                                         const dakit_matrix* obs_noise, const dakit_matrix* init_mean,
                                         const dakit_matrix* init_cov, double tau, double dt, dakit_model** out) {
    return guarded([&] {
        need(out, "out");
        *out = nullptr;
        need(obs, "obs");
        need(model_noise, "model_noise");
        need(obs_noise, "obs_noise");
        *out = new dakit_model{dakit::make_lorenz63_model(obs->value, model_noise->value, obs_noise->value,
                                                          initial(init_mean, init_cov), tau, dt)};
    });
}

void dakit_model_destroy(dakit_model* m) { delete m; }

size_t dakit_model_state_dim(const dakit_model* m) { return m ? size_t(m->value.dim_state) : 0; }

size_t dakit_model_obs_dim(const dakit_model* m) { return m ? size_t(m->value.dim_obs) : 0; }

dakit_status dakit_simulate(const dakit_model* m, size_t steps, uint64_t seed, dakit_matrix** truth,
                            dakit_matrix** obs) {
    return guarded([&] {
        need(m, "model");
        need(truth, "truth");
        need(obs, "obs");
        *truth = *obs = nullptr;
        // Same stream as the generate command, so both produce the same data.
        auto [t, y] = dakit::simulate(m->value, Eigen::Index(steps), dakit::RngStream(seed).derive("generate"));
        std::unique_ptr<dakit_matrix> tm(wrap(std::move(t.states)));
        *obs = wrap(std::move(y.obs));
        *truth = tm.release();
    });
}

dakit_status dakit_kalman_filter(const dakit_model* m, const dakit_matrix* obs, dakit_matrix** mean,
                                 dakit_matrix** spread) {
    return guarded([&] {
        need(m, "model");
        need(obs, "obs");
        need(mean, "mean");
        need(spread, "spread");
        *mean = *spread = nullptr;
        const dakit::filters::FilterTrace t = dakit::filters::kalman_run(m->value, dakit::ObservationSeries{obs->value});
        std::unique_ptr<dakit_matrix> mm(wrap(t.mean));
        *spread = wrap(dakit::Matrix(t.spread));
        *mean = mm.release();
    });
}

dakit_status dakit_steady_state_gain(const dakit_matrix* dynamics, const dakit_matrix* obs,
                                     const dakit_matrix* model_noise, const dakit_matrix* obs_noise,
                                     dakit_matrix** gain) {
    return guarded([&] {
        need(gain, "gain");
        *gain = nullptr;
        need(dynamics, "dynamics");
        need(obs, "obs");
        need(model_noise, "model_noise");
        need(obs_noise, "obs_noise");
        *gain = wrap(dakit::filters::steady_state_gain(dynamics->value, obs->value, model_noise->value,
                                                       obs_noise->value)
                         .gain);
    });
}

dakit_status dakit_crps_gaussian(double mean, double sd, double verification, double* out) {
    return guarded([&] {
        need(out, "out");
        *out = dakit::scoring::crps_gaussian(mean, sd, verification);
    });
}

dakit_status dakit_mf_allocate(size_t n, const double* costs, double sigma_hi, const double* sigmas,
                               const double* rhos, double budget, int64_t* sizes, double* weights,
                               double* variance) {
    return guarded([&] {
        dakit::require(n >= 1, dakit::ErrorKind::argument, "at least one model is needed");
        need(costs, "costs");
        need(sizes, "sizes");
        need(variance, "variance");
        if (n > 1) {
            need(sigmas, "sigmas");
            need(rhos, "rhos");
            need(weights, "weights");
        }
        namespace mf = dakit::multifidelity;
        mf::FidelityStats stats;
        stats.sigma_hi = sigma_hi;
        stats.sigma = dakit::Vector::Map(sigmas ? sigmas : costs, Eigen::Index(n - 1));
        stats.rho = dakit::Vector::Map(rhos ? rhos : costs, Eigen::Index(n - 1));
        const mf::MfmcPlan plan = mf::mosap_allocate(std::vector<double>(costs, costs + n), stats, budget);
        for (size_t i = 0; i < n; ++i) sizes[i] = int64_t(plan.sizes[i]);
        for (size_t i = 0; i + 1 < n; ++i) weights[i] = plan.weights(Eigen::Index(i));
        *variance = plan.variance;
    });
}

size_t dakit_command_count(void) { return dakit::experiment::command_names().size(); }

const char* dakit_command_name(size_t index) {
    const auto& names = dakit::experiment::command_names();
    return index < names.size() ? names[index].c_str() : nullptr;
}

int dakit_is_command(const char* name) { return name != nullptr && dakit::experiment::is_command(name); }

dakit_status dakit_config_canonicalize(const char* json, char** out) {
    return guarded([&] {
        need(json, "json");
        need(out, "out");
        *out = nullptr;
        *out = duplicate(dakit::experiment::emit_config(dakit::experiment::parse_config(json)));
    });
}

dakit_status dakit_run(const char* command, const char* config_json, const char* base_dir, dakit_result** out) {
    return guarded([&] {
        need(command, "command");
        need(config_json, "config_json");
        need(out, "out");
        *out = nullptr;
        dakit::experiment::RunOptions opts;
        if (base_dir != nullptr) opts.base_dir = base_dir;
        const auto cfg = dakit::experiment::parse_config(config_json);
        *out = new dakit_result{dakit::experiment::run(command, cfg, opts)};
    });
}

void dakit_result_destroy(dakit_result* r) { delete r; }

size_t dakit_result_artifact_count(const dakit_result* r) { return r ? r->value.artifacts.size() : 0; }

const char* dakit_result_artifact_name(const dakit_result* r, size_t index) {
    return r && index < r->value.artifacts.size() ? r->value.artifacts[index].name.c_str() : nullptr;
}

const char* dakit_result_artifact_content(const dakit_result* r, size_t index, size_t* length) {
    if (!r || index >= r->value.artifacts.size()) return nullptr;
    const std::string& c = r->value.artifacts[index].content;
    if (length != nullptr) *length = c.size();
    return c.c_str();
}

const char* dakit_result_summary(const dakit_result* r) { return r ? r->value.summary_json.c_str() : nullptr; }

}  // extern "C"
