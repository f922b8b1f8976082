#include "dakit/optimize.hpp"

#include "dakit/error.hpp"
#include "dakit/parallel.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace dakit::optimize {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double value_or_nan(const ScalarFn& f, const Vector& x) { return f ? f(x) : kNaN; }

void abort_trace(Trace& t, StopReason reason, const std::string& why) {
    t.aborted = true;
    t.reason = reason;
    t.message = why;
}

Vector central_gradient(const ScalarFn& f, const Vector& x, double h) {
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector up = x, dn = x;
        const double hi = h * std::max(1.0, std::abs(x(i)));
        up(i) += hi;
        dn(i) -= hi;
        g(i) = (f(up) - f(dn)) / (2.0 * hi);
    }
    return g;
}

double rel_gap(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

}  // namespace

double derivative_check(const Objective& obj, const std::vector<Vector>& probes, double h) {
    double worst = 0.0;
    for (const Vector& x : probes) {
        if (obj.value && obj.gradient) worst = std::max(worst, rel_gap(obj.gradient(x), central_gradient(obj.value, x, h)));
        if (obj.gradient && obj.hessian) {
            Matrix fd(x.size(), x.size());
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                Vector up = x, dn = x;
                const double hi = h * std::max(1.0, std::abs(x(i)));
                up(i) += hi;
                dn(i) -= hi;
                fd.col(i) = (obj.gradient(up) - obj.gradient(dn)) / (2.0 * hi);
            }
            worst = std::max(worst, rel_gap(obj.hessian(x), fd));
        }
        if (obj.residual && obj.residual_jacobian) {
            const Matrix jac = obj.residual_jacobian(x);
            Matrix fd(jac.rows(), x.size());
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                Vector up = x, dn = x;
                const double hi = h * std::max(1.0, std::abs(x(i)));
                up(i) += hi;
                dn(i) -= hi;
                fd.col(i) = (obj.residual(up) - obj.residual(dn)) / (2.0 * hi);
            }
            worst = std::max(worst, rel_gap(jac, fd));
        }
    }
    return worst;
}

Trace gradient_descent(const Objective& obj, const Vector& x0, const StepRule& step, int iters, double tol) {
    require(static_cast<bool>(obj.gradient), ErrorKind::argument, "gradient_descent: gradient required");
    require(iters >= 0, ErrorKind::argument, "gradient_descent: negative iteration count");
    require(step.value > 0.0, ErrorKind::argument, "gradient_descent: step parameter must be positive");
    require(step.kind != StepKind::armijo || static_cast<bool>(obj.value), ErrorKind::argument,
            "gradient_descent: Armijo steps need the objective value");
    Trace t;
    Vector x = x0;
    double fx = value_or_nan(obj.value, x);
    t.iterates.push_back(x);
    t.values.push_back(fx);
    // Armijo trials start from twice the last accepted step (capped at the
    // configured first step) so a well-scaled run does not re-backtrack from
    // scratch every iteration.
    double warm = step.value;
    for (int j = 0; j < iters; ++j) {
        const Vector g = obj.gradient(x);
        if (!g.allFinite()) {
            abort_trace(t, StopReason::non_finite, "gradient_descent: non-finite gradient");
            return t;
        }
        if (g.norm() <= tol) {
            t.reason = StopReason::converged;
            return t;
        }
        Vector next;
        double fnext = kNaN;
        if (step.kind == StepKind::armijo) {
            const double slope = g.squaredNorm();
            double alpha = warm;
            bool accepted = slope == 0.0;
            next = x;
            fnext = fx;
            for (int b = 0; !accepted && b <= step.max_backtracks; ++b) {
                next = x - alpha * g;
                fnext = obj.value(next);
                accepted = std::isfinite(fnext) && fnext <= fx - step.armijo_c * alpha * slope;
                if (!accepted) alpha *= step.shrink;
            }
            warm = std::min(step.value, 2.0 * alpha);
            if (!accepted) {
                abort_trace(t, StopReason::line_search, "gradient_descent: line search failed");
                return t;
            }
        } else {
            const double alpha = step.kind == StepKind::fixed ? step.value : 1.0 / step.value;
            next = x - alpha * g;
            fnext = value_or_nan(obj.value, next);
        }
        if (!next.allFinite() || (obj.value && !std::isfinite(fnext))) {
            abort_trace(t, StopReason::non_finite, "gradient_descent: non-finite iterate");
            return t;
        }
        x = std::move(next);
        fx = fnext;
        t.iterates.push_back(x);
        t.values.push_back(fx);
    }
    return t;
}

std::vector<std::size_t> sgd_batch(std::size_t terms, std::size_t batch, const RngStream& rng, int j) {
    std::vector<std::size_t> idx(batch);
    if (batch == terms) {
        for (std::size_t i = 0; i < terms; ++i) idx[i] = i;
        return idx;
    }
    RngStream s = rng.derive("sgd.batch", static_cast<std::uint64_t>(j));
    for (std::size_t& i : idx) i = static_cast<std::size_t>(s.below(terms));
    return idx;
}

Trace sgd(const TermGradient& term_gradient, std::size_t terms, const Vector& x0, std::size_t batch,
          const Schedule& schedule, const RngStream& rng, int iters, const ScalarFn& value) {
    require(terms >= 1, ErrorKind::argument, "sgd: empty term set");
    require(batch >= 1 && batch <= terms, ErrorKind::argument, "sgd: batch size must be in [1, N]");
    Trace t;
    Vector x = x0;
    t.iterates.push_back(x);
    t.values.push_back(value_or_nan(value, x));
    for (int j = 0; j < iters; ++j) {
        const std::vector<std::size_t> idx = sgd_batch(terms, batch, rng, j);
        std::vector<Vector> grads(batch);
        parallel_for(batch, [&](std::size_t b) { grads[b] = term_gradient(x, idx[b]); });
        Vector total = Vector::Zero(x.size());
        for (const Vector& g : grads) total += g;  // fixed order for reproducibility
        if (!total.allFinite()) {
            abort_trace(t, StopReason::non_finite, "sgd: non-finite gradient");
            return t;
        }
        x -= (schedule.at(j) / static_cast<double>(batch)) * total;
        t.iterates.push_back(x);
        t.values.push_back(value_or_nan(value, x));
    }
    return t;
}

Trace newton(const Objective& obj, const Vector& x0, int iters, double tol) {
    require(obj.gradient && obj.hessian, ErrorKind::argument, "newton: gradient and Hessian required");
    Trace t;
    Vector x = x0;
    t.iterates.push_back(x);
    t.values.push_back(value_or_nan(obj.value, x));
    for (int j = 0; j < iters; ++j) {
        const Vector g = obj.gradient(x);
        if (g.norm() <= tol) {
            t.reason = StopReason::converged;
            break;
        }
        const Matrix hess = obj.hessian(x);
        Eigen::FullPivLU<Matrix> lu(hess);
        if (lu.rank() < hess.rows()) {
            std::ostringstream os;
            os << "newton: singular Hessian at iterate " << j;
            fail(ErrorKind::numeric, os.str());
        }
        x -= lu.solve(g);
        if (!x.allFinite()) {
            abort_trace(t, StopReason::non_finite, "newton: non-finite iterate");
            return t;
        }
        t.iterates.push_back(x);
        t.values.push_back(value_or_nan(obj.value, x));
    }
    return t;
}

Trace gauss_newton(const VectorMap& residual, const JacobianMap& jacobian, const Vector& x0, int iters, double tol,
                   double damping) {
    require(residual && jacobian, ErrorKind::argument, "gauss_newton: residual and Jacobian required");
    require(damping >= 0.0, ErrorKind::argument, "gauss_newton: damping must be nonnegative");
    auto half_sq = [&](const Vector& x) { return 0.5 * residual(x).squaredNorm(); };
    Trace t;
    Vector x = x0;
    double fx = half_sq(x);
    t.iterates.push_back(x);
    t.values.push_back(fx);
    double lambda = damping;
    for (int j = 0; j < iters; ++j) {
        const Vector g = residual(x);
        const Matrix jac = jacobian(x);
        const Vector grad = jac.transpose() * g;
        if (grad.norm() <= tol) {
            t.reason = StopReason::converged;
            break;
        }
        const Matrix normal = jac.transpose() * jac;
        if (lambda == 0.0) {
            Eigen::FullPivLU<Matrix> lu(normal);
            if (lu.rank() < normal.rows()) fail(ErrorKind::numeric, "gauss_newton: rank-deficient Jacobian without damping");
            x -= lu.solve(grad);
            fx = half_sq(x);
        } else {
            // Levenberg: retry with heavier damping until the step descends.
            bool accepted = false;
            while (!accepted && lambda < 1e20) {
                const Matrix damped = normal + lambda * Matrix::Identity(normal.rows(), normal.cols());
                const Vector cand = x - damped.llt().solve(grad);
                const double fc = half_sq(cand);
                if (std::isfinite(fc) && fc < fx) {
                    x = cand;
                    fx = fc;
                    lambda /= 10.0;
                    accepted = true;
                } else {
                    lambda *= 10.0;
                }
            }
            if (!accepted) {
                abort_trace(t, StopReason::no_descent, "gauss_newton: no descent step found");
                return t;
            }
        }
        if (!x.allFinite()) {
            abort_trace(t, StopReason::non_finite, "gauss_newton: non-finite iterate");
            return t;
        }
        t.iterates.push_back(x);
        t.values.push_back(fx);
    }
    return t;
}

double data_misfit(const VectorMap& forward, const Vector& u, const Vector& y, const Matrix& gamma) {
    return 0.5 * mahalanobis_sq(y - forward(u), gamma, "data_misfit");
}

EkiTrace eki_run(const VectorMap& forward, const Vector& y, const Matrix& gamma, const Ensemble& init,
                 const EkiConfig& cfg) {
    const Eigen::Index n = init.size(), k = y.size();
    require(n >= 2, ErrorKind::argument, "eki_run: ensemble needs at least two members");
    require(gamma.rows() == k && gamma.cols() == k, ErrorKind::argument, "eki_run: Gamma shape");
    require(cfg.iters >= 0, ErrorKind::argument, "eki_run: negative iteration count");
    const Matrix gamma_factor = cholesky_lower(gamma, "eki_run: Gamma");
    const auto nn = static_cast<std::size_t>(n);

    EkiTrace t;
    Ensemble e = init;
    auto record = [&](const Ensemble& ens) {
        t.ensembles.push_back(ens);
        t.mean_misfit.push_back(data_misfit(forward, ens.members.colwise().mean().transpose(), y, gamma));
    };
    record(e);
    for (int it = 0; it < cfg.iters; ++it) {
        if (cfg.discrepancy_stop && t.mean_misfit.back() <= static_cast<double>(k)) {
            t.stopped_by_discrepancy = true;
            break;
        }
        Matrix g(n, k);
        parallel_for(nn, [&](std::size_t m) {
            const auto i = static_cast<Eigen::Index>(m);
            g.row(i) = forward(e.members.row(i).transpose()).transpose();
        });
        const Matrix cu = e.members.rowwise() - e.members.colwise().mean();
        const Matrix cg = g.rowwise() - g.colwise().mean();
        const double dn = static_cast<double>(n);
        const Matrix c_ug = cu.transpose() * cg / dn;
        const Matrix c_gg = cg.transpose() * cg / dn;
        Eigen::LLT<Matrix> llt(symmetrize(c_gg + gamma));
        require(llt.info() == Eigen::Success, ErrorKind::numeric, "eki_run: innovation covariance not positive definite");
        const Matrix gain = llt.solve(c_ug.transpose()).transpose();

        Matrix innov = (-g).rowwise() + y.transpose();
        parallel_for(nn, [&](std::size_t m) {
            RngStream s = cfg.rng.derive("eki.obs", static_cast<std::uint64_t>(it), m);
            innov.row(static_cast<Eigen::Index>(m)) -= (gamma_factor * s.normal_vector(k)).transpose();
        });
        e.members += innov * gain.transpose();
        record(e);
    }
    return t;
}

EkiTrace eki_run(const VectorMap& forward, const Vector& y, const Matrix& gamma, const Gaussian& init,
                 Eigen::Index members, const EkiConfig& cfg) {
    return eki_run(forward, y, gamma, gaussian_sample(init, members, cfg.rng.derive("eki.init")), cfg);
}

}  // namespace dakit::optimize
