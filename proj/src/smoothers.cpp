#include "dakit/smoothers.hpp"

#include "dakit/parallel.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>

namespace dakit::smoothers {

namespace {

// Cached factorizations of the three covariances.
struct Weights {
    Eigen::LLT<Matrix> prior, model, obs;
    Matrix prior_inv, model_inv, obs_inv;
};

Weights make_weights(const FourDVarProblem& p) {
    Weights w;
    w.prior.compute(p.model.init.cov);
    w.obs.compute(p.model.obs_noise);
    const Eigen::Index d = p.model.dim_state, k = p.model.dim_obs;
    w.prior_inv = w.prior.solve(Matrix::Identity(d, d));
    w.obs_inv = w.obs.solve(Matrix::Identity(k, k));
    if (p.mode == Constraint::weak) {
        w.model.compute(p.model.model_noise);
        w.model_inv = w.model.solve(Matrix::Identity(d, d));
    }
    return w;
}

double half_sq(const Eigen::LLT<Matrix>& llt, const Vector& r) {
    return 0.5 * llt.matrixL().solve(r).squaredNorm();
}

void check_trajectory(const FourDVarProblem& p, const Trajectory& v) {
    require(v.states.rows() == p.steps() + 1 && v.states.cols() == p.model.dim_state, ErrorKind::argument,
            "4DVar: trajectory must have J+1 rows of dimension d");
}

// Values and Jacobians of the maps along a trajectory, one entry per time
// index, evaluated in parallel.
struct Linearization {
    std::vector<Vector> pushed;    // Psi(v_j), j = 0..J-1
    std::vector<Matrix> dyn_jac;   // D Psi(v_j)
    std::vector<Vector> observed;  // h(v_{j+1})
    std::vector<Matrix> obs_jac;   // D h(v_{j+1})
};

Linearization linearize(const StateSpaceModel& m, const Matrix& states, bool with_dynamics) {
    const auto steps = static_cast<std::size_t>(states.rows() - 1);
    Linearization lin;
    lin.pushed.resize(steps);
    lin.dyn_jac.resize(steps);
    lin.observed.resize(steps);
    lin.obs_jac.resize(steps);
    parallel_for(steps, [&](std::size_t j) {
        const auto i = static_cast<Eigen::Index>(j);
        if (with_dynamics) {
            const Vector v = states.row(i).transpose();
            lin.pushed[j] = m.dynamics(v);
            lin.dyn_jac[j] = m.jacobian_dynamics(v);
        }
        const Vector next = states.row(i + 1).transpose();
        lin.observed[j] = m.obs_map(next);
        lin.obs_jac[j] = m.jacobian_obs(next);
    });
    return lin;
}

Matrix flat_to_states(const Vector& x, Eigen::Index rows, Eigen::Index d) {
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(x.data(), rows,
                                                                                                     d);
}

Vector states_to_flat(const Matrix& s) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = s;
    return Eigen::Map<const Vector>(rm.data(), rm.size());
}

// Gradient and Gauss-Newton normal matrix in block-tridiagonal form.
struct WeakSystem {
    std::vector<Matrix> diag, upper;
    Vector gradient;
};

WeakSystem weak_system(const FourDVarProblem& p, const Weights& w, const Matrix& states) {
    const Eigen::Index d = p.model.dim_state, steps = p.steps();
    const Linearization lin = linearize(p.model, states, true);
    WeakSystem s;
    s.diag.assign(static_cast<std::size_t>(steps + 1), Matrix::Zero(d, d));
    s.upper.assign(static_cast<std::size_t>(steps), Matrix::Zero(d, d));
    s.gradient = Vector::Zero((steps + 1) * d);

    s.diag[0] += w.prior_inv;
    s.gradient.head(d) += w.prior_inv * (states.row(0).transpose() - p.model.init.mean);
    for (Eigen::Index j = 0; j < steps; ++j) {
        const auto u = static_cast<std::size_t>(j);
        const Matrix& a = lin.dyn_jac[u];
        const Matrix& h = lin.obs_jac[u];
        const Vector e = states.row(j + 1).transpose() - lin.pushed[u];
        const Vector o = p.obs.at(j + 1) - lin.observed[u];
        const Matrix sa = w.model_inv * a;
        s.diag[u] += a.transpose() * sa;
        s.diag[u + 1] += w.model_inv + h.transpose() * w.obs_inv * h;
        s.upper[u] -= sa.transpose();
        const Vector se = w.model_inv * e;
        s.gradient.segment(j * d, d) -= a.transpose() * se;
        s.gradient.segment((j + 1) * d, d) += se - h.transpose() * (w.obs_inv * o);
    }
    return s;
}

struct StrongSystem {
    Matrix normal;
    Vector gradient;
};

StrongSystem strong_system(const FourDVarProblem& p, const Weights& w, const Matrix& states) {
    const Eigen::Index d = p.model.dim_state, steps = p.steps();
    const Linearization lin = linearize(p.model, states, false);
    StrongSystem s;
    s.normal = w.prior_inv;
    s.gradient = w.prior_inv * (states.row(0).transpose() - p.model.init.mean);
    Matrix sens = Matrix::Identity(d, d);  // d v_j / d v_0
    for (Eigen::Index j = 0; j < steps; ++j) {
        const auto u = static_cast<std::size_t>(j);
        sens = p.model.jacobian_dynamics(states.row(j).transpose()) * sens;
        const Matrix hs = lin.obs_jac[u] * sens;
        s.normal += hs.transpose() * w.obs_inv * hs;
        s.gradient -= hs.transpose() * (w.obs_inv * (p.obs.at(j + 1) - lin.observed[u]));
    }
    s.normal = symmetrize(s.normal);
    return s;
}

double objective_from_states(const FourDVarProblem& p, const Weights& w, const Matrix& states) {
    const Eigen::Index steps = p.steps();
    std::vector<double> terms(static_cast<std::size_t>(steps));
    parallel_for(static_cast<std::size_t>(steps), [&](std::size_t j) {
        const auto i = static_cast<Eigen::Index>(j);
        const Vector next = states.row(i + 1).transpose();
        double t = half_sq(w.obs, p.obs.at(i + 1) - p.model.obs_map(next));
        if (p.mode == Constraint::weak) t += half_sq(w.model, next - p.model.dynamics(states.row(i).transpose()));
        terms[j] = t;
    });
    double total = half_sq(w.prior, states.row(0).transpose() - p.model.init.mean);
    for (double t : terms) total += t;  // fixed order keeps the sum thread-count independent
    return total;
}

}  // namespace

void FourDVarProblem::validate() const {
    model.validate();
    require(obs.steps() >= 1 && obs.obs.cols() == model.dim_obs, ErrorKind::argument,
            "4DVar: observations do not match the model");
    require(Eigen::LLT<Matrix>(model.init.cov).info() == Eigen::Success, ErrorKind::configuration,
            "4DVar: prior covariance must be positive definite");
    if (mode == Constraint::weak) {
        require(model.model_noise.size() > 0 && Eigen::LLT<Matrix>(model.model_noise).info() == Eigen::Success &&
                    min_eigenvalue_sym(model.model_noise) > 0.0,
                ErrorKind::configuration, "4DVar: weak constraint needs a positive definite model noise");
    }
}

Trajectory rollout(const StateSpaceModel& model, const Vector& v0, Eigen::Index steps) {
    Trajectory t{Matrix(steps + 1, v0.size())};
    Vector v = v0;
    t.states.row(0) = v.transpose();
    for (Eigen::Index j = 1; j <= steps; ++j) {
        v = model.dynamics(v);
        t.states.row(j) = v.transpose();
    }
    return t;
}

double fourdvar_objective(const FourDVarProblem& p, const Trajectory& v) {
    p.validate();
    check_trajectory(p, v);
    const Weights w = make_weights(p);
    if (p.mode == Constraint::strong) {
        return objective_from_states(p, w, rollout(p.model, v.state(0), p.steps()).states);
    }
    return objective_from_states(p, w, v.states);
}

ad::Var fourdvar_objective(const FourDVarProblem& p, const std::vector<ad::Var>& flat) {
    p.validate();
    const StateSpaceModel& m = p.model;
    const Eigen::Index d = m.dim_state, steps = p.steps();
    const Eigen::Index rows = p.mode == Constraint::weak ? steps + 1 : 1;
    require(static_cast<Eigen::Index>(flat.size()) == rows * d, ErrorKind::argument,
            "4DVar: flattened input has the wrong length");
    require(static_cast<bool>(m.dynamics_tape) || m.linear_dynamics(), ErrorKind::precondition,
            "4DVar: the dynamics have no autodiff form");
    require(static_cast<bool>(m.obs_tape) || m.linear_obs(), ErrorKind::precondition,
            "4DVar: the observation map has no autodiff form");

    auto state = [&](Eigen::Index j) {
        return ad::vcat(std::vector<ad::Var>(flat.begin() + j * d, flat.begin() + (j + 1) * d));
    };
    const ad::Var v0 = state(0);
    auto dyn = [&](const ad::Var& v) {
        return m.dynamics_tape ? m.dynamics_tape(v) : ad::matvec(ad::constant_like(v, *m.dynamics_matrix), v);
    };
    auto obs = [&](const ad::Var& v) {
        return m.obs_tape ? m.obs_tape(v) : ad::matvec(ad::constant_like(v, *m.obs_matrix), v);
    };
    auto quad = [&](const ad::Var& r, const Matrix& precision) {
        return 0.5 * ad::dot(r, ad::matvec(ad::constant_like(r, precision), r));
    };

    const Weights w = make_weights(p);
    ad::Var total = quad(v0 - ad::constant_like(v0, m.init.mean), w.prior_inv);
    ad::Var prev = v0;
    for (Eigen::Index j = 0; j < steps; ++j) {
        ad::Var next = p.mode == Constraint::weak ? state(j + 1) : dyn(prev);
        if (p.mode == Constraint::weak) total = total + quad(next - dyn(prev), w.model_inv);
        total = total + quad(ad::constant_like(next, p.obs.at(j + 1)) - obs(next), w.obs_inv);
        prev = next;
    }
    return total;
}

ad::Program fourdvar_program(const FourDVarProblem& p) {
    return [p](ad::Tape&, const std::vector<ad::Var>& in) { return std::vector<ad::Var>{fourdvar_objective(p, in)}; };
}

Vector fourdvar_gradient(const FourDVarProblem& p, const Trajectory& v) {
    p.validate();
    check_trajectory(p, v);
    const Weights w = make_weights(p);
    if (p.mode == Constraint::strong) {
        return strong_system(p, w, rollout(p.model, v.state(0), p.steps()).states).gradient;
    }
    return weak_system(p, w, v.states).gradient;
}

Vector solve_block_tridiagonal(const std::vector<Matrix>& diag, const std::vector<Matrix>& upper,
                               const Vector& rhs) {
    const std::size_t n = diag.size();
    require(n >= 1 && upper.size() + 1 == n, ErrorKind::argument, "block tridiagonal: block counts disagree");
    const Eigen::Index d = diag[0].rows();
    require(rhs.size() == static_cast<Eigen::Index>(n) * d, ErrorKind::argument, "block tridiagonal: rhs length");

    // Schur complements S_i = D_i - U_{i-1}^T S_{i-1}^{-1} U_{i-1}.
    std::vector<Eigen::LLT<Matrix>> schur(n);
    std::vector<Vector> z(n);
    for (std::size_t i = 0; i < n; ++i) {
        Matrix s = diag[i];
        z[i] = rhs.segment(static_cast<Eigen::Index>(i) * d, d);
        if (i > 0) {
            const Matrix& u = upper[i - 1];
            s -= u.transpose() * schur[i - 1].solve(u);
            z[i] -= u.transpose() * schur[i - 1].solve(z[i - 1]);
        }
        schur[i].compute(symmetrize(s));
        require(schur[i].info() == Eigen::Success, ErrorKind::numeric,
                "block tridiagonal: normal matrix is not positive definite");
    }
    Vector x(rhs.size());
    for (std::size_t k = n; k-- > 0;) {
        Vector r = z[k];
        if (k + 1 < n) r -= upper[k] * x.segment(static_cast<Eigen::Index>(k + 1) * d, d);
        x.segment(static_cast<Eigen::Index>(k) * d, d) = schur[k].solve(r);
    }
    return x;
}

SolveResult fourdvar_solve(const FourDVarProblem& p, const Trajectory& init, double tol, int max_iter) {
    p.validate();
    check_trajectory(p, init);
    require(tol > 0.0 && max_iter >= 1, ErrorKind::argument, "fourdvar_solve: tol and max_iter must be positive");
    const Weights w = make_weights(p);
    const Eigen::Index d = p.model.dim_state, steps = p.steps();
    const bool weak = p.mode == Constraint::weak;

    // Iterate: the full trajectory (weak) or v_0 (strong).
    auto states_of = [&](const Vector& x) {
        return weak ? flat_to_states(x, steps + 1, d) : rollout(p.model, x, steps).states;
    };
    Vector x = weak ? states_to_flat(init.states) : Vector(init.state(0));
    Matrix states = states_of(x);
    double f = objective_from_states(p, w, states);

    SolveDiagnostics diag;
    diag.objective.push_back(f);
    double lambda = 1e-3;

    // Gradient and a damped step solver at a set of states.
    struct Linearization {
        Vector grad;
        std::function<Vector(double)> step;
    };
    auto linearize = [&](const Matrix& at) {
        Linearization lin;
        if (weak) {
            auto sys = std::make_shared<WeakSystem>(weak_system(p, w, at));
            lin.grad = sys->gradient;
            lin.step = [sys, d](double lam) {
                std::vector<Matrix> damped = sys->diag;
                for (Matrix& b : damped) b += lam * Matrix::Identity(d, d);
                return Vector(-solve_block_tridiagonal(damped, sys->upper, sys->gradient));
            };
        } else {
            auto sys = std::make_shared<StrongSystem>(strong_system(p, w, at));
            lin.grad = sys->gradient;
            lin.step = [sys, d](double lam) {
                Eigen::LLT<Matrix> llt(sys->normal + lam * Matrix::Identity(d, d));
                require(llt.info() == Eigen::Success, ErrorKind::numeric,
                        "fourdvar_solve: normal matrix is not positive definite");
                return Vector(-llt.solve(sys->gradient));
            };
        }
        return lin;
    };
    Linearization current = linearize(states);
    Vector& grad = current.grad;

    auto result = [&] {
        diag.gradient_norm = grad.cwiseAbs().maxCoeff();
        diag.damping = lambda;
        return SolveResult{Trajectory{states}, diag};
    };

    for (int it = 0; it < max_iter; ++it) {
        if (grad.cwiseAbs().maxCoeff() <= tol) return result();
        diag.iterations = it + 1;
        const Vector candidate = x + current.step(lambda);
        const Matrix cand_states = states_of(candidate);
        const double fc = objective_from_states(p, w, cand_states);
        bool accept = std::isfinite(fc) && fc < f;
        std::optional<Linearization> next;
        // Close to the minimizer the true decrease falls below the rounding
        // error of f; there a smaller gradient decides instead.
        if (!accept && std::isfinite(fc) && fc <= f + 16.0 * std::numeric_limits<double>::epsilon() * std::abs(f)) {
            next = linearize(cand_states);
            accept = next->grad.cwiseAbs().maxCoeff() < grad.cwiseAbs().maxCoeff();
        }
        if (accept) {
            x = candidate;
            states = cand_states;
            f = fc;
            diag.objective.push_back(f);
            lambda /= 10.0;
            current = next ? std::move(*next) : linearize(states);
        } else {
            lambda *= 10.0;
            if (lambda > 1e20) break;  // no descent direction left at this precision
        }
    }
    if (grad.cwiseAbs().maxCoeff() <= tol) return result();
    std::ostringstream os;
    os << "fourdvar_solve: gradient norm " << grad.cwiseAbs().maxCoeff() << " above tolerance " << tol << " after "
       << diag.iterations << " iterations";
    throw SolveError(os.str(), result());
}

}  // namespace dakit::smoothers
