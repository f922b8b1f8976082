#pragma once

#include "dakit/autodiff.hpp"
#include "dakit/core.hpp"
#include "dakit/error.hpp"

#include <vector>

namespace dakit::smoothers {

enum class Constraint { weak, strong };

struct FourDVarProblem {
    StateSpaceModel model;
    ObservationSeries obs;
    Constraint mode = Constraint::weak;

    Eigen::Index steps() const { return obs.steps(); }
    // Weak mode needs a positive definite model noise; both modes need a
    // positive definite prior and observation noise.
    void validate() const;
};

// Negative log posterior of a trajectory up to a constant. In strong mode
// only row 0 of V is used and the rest of the path is the noise-free rollout.
double fourdvar_objective(const FourDVarProblem& p, const Trajectory& v);

// The same objective written against the autodiff tape. `flat` holds the
// trajectory row by row (weak mode) or v_0 alone (strong mode). The model's
// tape maps, or its explicit matrices, must be available.
ad::Var fourdvar_objective(const FourDVarProblem& p, const std::vector<ad::Var>& flat);
ad::Program fourdvar_program(const FourDVarProblem& p);

// Gradient with respect to the flattened trajectory (weak) or v_0 (strong),
// assembled from the model Jacobians.
Vector fourdvar_gradient(const FourDVarProblem& p, const Trajectory& v);

// Noise-free rollout of the dynamics from v_0 over the problem's horizon.
Trajectory rollout(const StateSpaceModel& model, const Vector& v0, Eigen::Index steps);

struct SolveDiagnostics {
    int iterations = 0;
    double gradient_norm = 0.0;  // infinity norm at the returned iterate
    std::vector<double> objective;  // objective at each accepted iterate, starting with init
    double damping = 0.0;
};

struct SolveResult {
    Trajectory map;
    SolveDiagnostics diagnostics;
};

// Raised when the iteration budget runs out; carries the best iterate.
class SolveError : public Error {
public:
    SolveError(const std::string& message, SolveResult best)
        : Error(ErrorKind::non_convergence, message), best_(std::move(best)) {}
    const SolveResult& best() const noexcept { return best_; }

private:
    SolveResult best_;
};

// Levenberg-damped Gauss-Newton on the whitened residual form of the
// objective. Weak mode solves the block-tridiagonal normal equations; strong
// mode optimizes over v_0 with exact rollouts. A step is accepted when it
// lowers the objective, or when the change is within rounding of f and the
// gradient shrinks, so the recorded objective is monotone up to rounding.
SolveResult fourdvar_solve(const FourDVarProblem& p, const Trajectory& init, double tol = 1e-9,
                           int max_iter = 200);

// Solves the symmetric positive definite block-tridiagonal system with
// diagonal blocks `diag[i]` and super-diagonal blocks `upper[i]` (between
// unknowns i and i+1) by block Cholesky elimination.
Vector solve_block_tridiagonal(const std::vector<Matrix>& diag, const std::vector<Matrix>& upper,
                               const Vector& rhs);

}  // namespace dakit::smoothers
