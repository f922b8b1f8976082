#pragma once

#include "dakit/autodiff.hpp"
#include "dakit/linalg.hpp"
#include "dakit/rng.hpp"

#include <functional>
#include <optional>
#include <utility>

namespace dakit {

struct Gaussian {
    Vector mean;
    Matrix cov;

    Eigen::Index dim() const { return mean.size(); }
    // Throws an argument error when the shapes disagree, the covariance is not
    // symmetric to 1e-12 (relative) or has an eigenvalue below -1e-10 * trace.
    void validate(const char* what = "Gaussian") const;
};

using VectorMap = std::function<Vector(const Vector&)>;
using JacobianMap = std::function<Matrix(const Vector&)>;
using TapeMap = std::function<ad::Var(const ad::Var&)>;

// Discrete-time state-space model
//   v_{j+1} = dynamics(v_j) + xi_j,   xi_j ~ N(0, model_noise)
//   y_{j+1} = obs_map(v_{j+1}) + eta, eta ~ N(0, obs_noise)
// with v_0 ~ init. The optional members describe the same maps in other
// forms: an explicit matrix when a map is linear, a Jacobian, or a version
// written against the autodiff tape.
struct StateSpaceModel {
    Eigen::Index dim_state = 0;
    Eigen::Index dim_obs = 0;

    VectorMap dynamics;
    std::optional<Matrix> dynamics_matrix;
    JacobianMap dynamics_jacobian;
    TapeMap dynamics_tape;
    Matrix model_noise;

    VectorMap obs_map;
    std::optional<Matrix> obs_matrix;
    JacobianMap obs_jacobian;
    TapeMap obs_tape;
    Matrix obs_noise;

    Gaussian init;

    // Shape checks, a Cholesky test on the observation noise, and a probe
    // that obs_map agrees with obs_matrix when both are given.
    void validate() const;

    bool linear_dynamics() const { return dynamics_matrix.has_value(); }
    bool linear_obs() const { return obs_matrix.has_value(); }

    // Jacobian of the dynamics at v: explicit matrix, supplied Jacobian, or a
    // reverse sweep over dynamics_tape. Precondition error if none exists.
    Matrix jacobian_dynamics(const Vector& v) const;
    Matrix jacobian_obs(const Vector& v) const;
};

StateSpaceModel make_linear_model(const Matrix& a, const Matrix& h, const Matrix& model_noise,
                                  const Matrix& obs_noise, const Gaussian& init);

// Scalar model v' = a v + xi, y = h v + eta.
StateSpaceModel make_scalar_model(double a, double h, double model_var, double obs_var, double m0 = 0.0,
                                  double c0 = 1.0);

struct Lorenz63Params {
    double sigma = 10.0;
    double rho = 28.0;
    double beta = 8.0 / 3.0;
};

// Lorenz-63 flow map over an assimilation window `tau`, advanced by RK4 steps
// of size dt. tau must be a whole number of steps.
Vector lorenz63_flow(const Vector& v, double tau = 0.1, double dt = 0.01, const Lorenz63Params& p = {});
ad::Var lorenz63_flow(const ad::Var& v, double tau = 0.1, double dt = 0.01, const Lorenz63Params& p = {});

StateSpaceModel make_lorenz63_model(const Matrix& h, const Matrix& model_noise, const Matrix& obs_noise,
                                    const Gaussian& init, double tau = 0.1, double dt = 0.01);

// States v_0..v_J, one per row.
struct Trajectory {
    Matrix states;

    Eigen::Index steps() const { return states.rows() - 1; }
    Vector state(Eigen::Index j) const { return states.row(j).transpose(); }
};

// Observations y_1..y_J; row j-1 holds y_j.
struct ObservationSeries {
    Matrix obs;

    Eigen::Index steps() const { return obs.rows(); }
    Vector at(Eigen::Index j) const { return obs.row(j - 1).transpose(); }
};

struct Ensemble {
    Matrix members;  // N x d

    Eigen::Index size() const { return members.rows(); }
    Eigen::Index dim() const { return members.cols(); }
};

struct WeightedEnsemble {
    Matrix members;  // N x d
    Vector weights;  // N, nonnegative, summing to one

    Eigen::Index size() const { return members.rows(); }
    Eigen::Index dim() const { return members.cols(); }
    // Effective sample size 1 / sum w^2.
    double ess() const;
    void validate() const;
};

std::pair<Trajectory, ObservationSeries> simulate(const StateSpaceModel& model, Eigen::Index steps,
                                                  const RngStream& rng);

// Ensemble mean and covariance. The covariance divides by N unless
// `unbiased` is set, in which case it divides by N-1.
std::pair<Vector, Matrix> ensemble_moments(const Ensemble& e, bool unbiased = false);
std::pair<Vector, Matrix> weighted_moments(const WeightedEnsemble& e);

// Posterior of u ~ prior given y = L u + eta, eta ~ N(0, noise), in
// information form: C^{-1} = prior^{-1} + L^T noise^{-1} L.
Gaussian gaussian_posterior_linear(const Gaussian& prior, const Matrix& obs_op, const Matrix& noise,
                                   const Vector& y);

// n independent draws, one RNG child stream per draw.
Ensemble gaussian_sample(const Gaussian& g, Eigen::Index n, const RngStream& rng);

}  // namespace dakit
