#pragma once

#include "dakit/core.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dakit::optimize {

using ScalarFn = std::function<double(const Vector&)>;
using GradientFn = std::function<Vector(const Vector&)>;
using HessianFn = std::function<Matrix(const Vector&)>;

// An objective f with whatever derivative information is available. The
// residual form describes f = 1/2 |g(x)|^2.
struct Objective {
    ScalarFn value;
    GradientFn gradient;
    HessianFn hessian;
    VectorMap residual;
    JacobianMap residual_jacobian;
};

// Compares the supplied derivatives with central differences at each probe
// point. Returns the worst relative discrepancy found.
double derivative_check(const Objective& obj, const std::vector<Vector>& probes, double h = 1e-6);

enum class StopReason { budget, converged, non_finite, line_search, no_descent };

struct Trace {
    std::vector<Vector> iterates;  // x_0, x_1, ...
    std::vector<double> values;    // f at each iterate (NaN when no value function)
    bool aborted = false;          // stopped early because of a failure
    StopReason reason = StopReason::budget;
    std::string message;

    const Vector& last() const { return iterates.back(); }
    int steps() const { return static_cast<int>(iterates.size()) - 1; }
};

enum class StepKind { fixed, one_over_l, armijo };

struct StepRule {
    StepKind kind = StepKind::fixed;
    double value = 1e-2;  // the step for `fixed`, L for `one_over_l`, the largest trial step for `armijo`
    double armijo_c = 1e-4;
    double shrink = 0.5;
    int max_backtracks = 60;

    static StepRule fixed(double alpha) { return {StepKind::fixed, alpha}; }
    static StepRule one_over_l(double l) { return {StepKind::one_over_l, l}; }
    static StepRule armijo(double first = 1.0) { return {StepKind::armijo, first}; }
};

// x_{j+1} = x_j - alpha_j grad f(x_j), stopping early once |grad f| <= tol.
// Non-finite values or a failed line search stop the run; the trace up to
// that point is returned.
Trace gradient_descent(const Objective& obj, const Vector& x0, const StepRule& step, int iters, double tol = 0.0);

// Per-term gradient of F(x, z_i).
using TermGradient = std::function<Vector(const Vector&, std::size_t)>;

struct Schedule {
    double alpha0 = 1e-2;
    bool decay = false;  // alpha_j = alpha0 / (1 + j) when set

    double at(int j) const { return decay ? alpha0 / (1.0 + j) : alpha0; }
};

// Mini-batch stochastic gradient descent on f = (1/N) sum_i F(x, z_i).
// Batches of size M < N are drawn uniformly with replacement from the stream
// ("sgd.batch", j); M = N uses every term once.
Trace sgd(const TermGradient& term_gradient, std::size_t terms, const Vector& x0, std::size_t batch,
          const Schedule& schedule, const RngStream& rng, int iters, const ScalarFn& value = {});

// The batch indices used at step j, exposed for reproducibility checks.
std::vector<std::size_t> sgd_batch(std::size_t terms, std::size_t batch, const RngStream& rng, int j);

Trace newton(const Objective& obj, const Vector& x0, int iters, double tol);

// Gauss-Newton on 1/2 |g(x)|^2. damping = 0 gives the undamped iteration;
// a positive value starts the Levenberg schedule (x10 on a rejected step,
// /10 on an accepted one).
Trace gauss_newton(const VectorMap& residual, const JacobianMap& jacobian, const Vector& x0, int iters, double tol,
                   double damping = 0.0);

struct EkiConfig {
    int iters = 10;
    RngStream rng;
    // Stop once the ensemble-mean misfit 1/2 |y - G(mean)|^2_Gamma drops to
    // the data dimension (or below).
    bool discrepancy_stop = false;
};

struct EkiTrace {
    std::vector<Ensemble> ensembles;  // initial ensemble first
    std::vector<double> mean_misfit;  // misfit of G at the ensemble mean, per ensemble
    bool stopped_by_discrepancy = false;

    int iterations() const { return static_cast<int>(ensembles.size()) - 1; }
};

double data_misfit(const VectorMap& forward, const Vector& u, const Vector& y, const Matrix& gamma);

EkiTrace eki_run(const VectorMap& forward, const Vector& y, const Matrix& gamma, const Ensemble& init,
                 const EkiConfig& cfg);
EkiTrace eki_run(const VectorMap& forward, const Vector& y, const Matrix& gamma, const Gaussian& init,
                 Eigen::Index members, const EkiConfig& cfg);

}  // namespace dakit::optimize
