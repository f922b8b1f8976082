/* dakit C interface.
 *
 * Every object crosses the boundary as an opaque handle that the caller
 * releases with the matching *_destroy function. Functions return a
 * dakit_status; on failure the message (and, for configuration errors, the
 * individual violations) can be read back on the same thread until the next
 * failing call. Matrices are passed row-major. Strings returned through
 * `char**` out-parameters are owned by the caller and freed with
 * dakit_string_free; `const char*` results stay owned by the library.
 */
#ifndef DAKIT_DAKIT_H
#define DAKIT_DAKIT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DAKIT_API __declspec(dllexport)
#else
#define DAKIT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dakit_status {
    DAKIT_OK = 0,
    DAKIT_E_ARGUMENT = 1,
    DAKIT_E_CONFIGURATION = 2,
    DAKIT_E_PRECONDITION = 3,
    DAKIT_E_NUMERIC = 4,
    DAKIT_E_DOMAIN = 5,
    DAKIT_E_DEGENERATE = 6,
    DAKIT_E_NON_CONVERGENCE = 7,
    DAKIT_E_RANK = 8,
    DAKIT_E_CONSTRUCTION = 9,
    DAKIT_E_EVALUATION = 10,
    DAKIT_E_PARSE = 11,
    DAKIT_E_IO = 12,
    DAKIT_E_INTERNAL = 99
} dakit_status;

typedef struct dakit_matrix dakit_matrix;
typedef struct dakit_model dakit_model;
typedef struct dakit_result dakit_result;

/* Library information and errors. */
DAKIT_API const char* dakit_version(void);
DAKIT_API const char* dakit_status_name(dakit_status status);
DAKIT_API const char* dakit_last_error(void);
DAKIT_API size_t dakit_last_error_detail_count(void);
DAKIT_API const char* dakit_last_error_detail(size_t index);
DAKIT_API void dakit_string_free(char* s);

/* Worker threads used by parallel kernels; 0 picks the hardware count.
 * Results never depend on this setting. */
DAKIT_API dakit_status dakit_set_threads(int threads);
DAKIT_API int dakit_get_threads(void);

/* Dense matrices. `data` may be NULL to create a zero matrix. */
DAKIT_API dakit_status dakit_matrix_create(size_t rows, size_t cols, const double* data, dakit_matrix** out);
DAKIT_API void dakit_matrix_destroy(dakit_matrix* m);
DAKIT_API size_t dakit_matrix_rows(const dakit_matrix* m);
DAKIT_API size_t dakit_matrix_cols(const dakit_matrix* m);
DAKIT_API dakit_status dakit_matrix_get(const dakit_matrix* m, size_t row, size_t col, double* out);
/* Copies rows*cols values into `out`, row-major. */
DAKIT_API dakit_status dakit_matrix_copy(const dakit_matrix* m, double* out);

/* State-space models. `init_mean` is a d x 1 matrix. */
DAKIT_API dakit_status dakit_model_linear_create(const dakit_matrix* dynamics, const dakit_matrix* obs,
                                                 const dakit_matrix* model_noise, const dakit_matrix* obs_noise,
                                                 const dakit_matrix* init_mean, const dakit_matrix* init_cov,
                                                 dakit_model** out);
/* Lorenz-63 flow map over `tau` time units with RK4 steps of `dt`. */
DAKIT_API dakit_status dakit_model_lorenz63_create(const dakit_matrix* obs, const dakit_matrix* model_noise,
                                                   const dakit_matrix* obs_noise, const dakit_matrix* init_mean,
                                                   const dakit_matrix* init_cov, double tau, double dt,
                                                   dakit_model** out);
DAKIT_API void dakit_model_destroy(dakit_model* m);
DAKIT_API size_t dakit_model_state_dim(const dakit_model* m);
DAKIT_API size_t dakit_model_obs_dim(const dakit_model* m);

/* Draws a truth trajectory ((steps + 1) x d, row 0 is the initial state) and
 * the observations (steps x k). */
DAKIT_API dakit_status dakit_simulate(const dakit_model* m, size_t steps, uint64_t seed, dakit_matrix** truth,
                                      dakit_matrix** obs);

/* Kalman filter means (steps x d) and spreads (steps x 1); linear models only. */
DAKIT_API dakit_status dakit_kalman_filter(const dakit_model* m, const dakit_matrix* obs, dakit_matrix** mean,
                                           dakit_matrix** spread);

DAKIT_API dakit_status dakit_steady_state_gain(const dakit_matrix* dynamics, const dakit_matrix* obs,
                                               const dakit_matrix* model_noise, const dakit_matrix* obs_noise,
                                               dakit_matrix** gain);

DAKIT_API dakit_status dakit_crps_gaussian(double mean, double sd, double verification, double* out);

/* Multifidelity sample allocation. `costs` has n entries, high fidelity
 * first; `sigmas` and `rhos` describe the n - 1 surrogates. Writes n sample
 * counts, n - 1 weights and the predicted estimator variance. */
DAKIT_API dakit_status dakit_mf_allocate(size_t n, const double* costs, double sigma_hi, const double* sigmas,
                                         const double* rhos, double budget, int64_t* sizes, double* weights,
                                         double* variance);

/* Experiment configurations and batch runs. */
DAKIT_API size_t dakit_command_count(void);
DAKIT_API const char* dakit_command_name(size_t index);
DAKIT_API int dakit_is_command(const char* name);
/* Validates a JSON configuration and returns it with every default filled in. */
DAKIT_API dakit_status dakit_config_canonicalize(const char* json, char** out);
/* Runs one command; relative input paths resolve against `base_dir` (NULL
 * means the working directory). */
DAKIT_API dakit_status dakit_run(const char* command, const char* config_json, const char* base_dir,
                                 dakit_result** out);
DAKIT_API void dakit_result_destroy(dakit_result* r);
DAKIT_API size_t dakit_result_artifact_count(const dakit_result* r);
DAKIT_API const char* dakit_result_artifact_name(const dakit_result* r, size_t index);
DAKIT_API const char* dakit_result_artifact_content(const dakit_result* r, size_t index, size_t* length);
DAKIT_API const char* dakit_result_summary(const dakit_result* r);

#ifdef __cplusplus
}
#endif

#endif
