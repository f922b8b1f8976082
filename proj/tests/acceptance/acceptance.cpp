// Release acceptance checks. Prints one PASS/FAIL line per check and exits
// with status 0 only when the failing set equals the one named by
// --expect-fail (empty by default), so a known, documented failure can be
// tracked without hiding a new one.
#include "dakit/autodiff.hpp"
#include "dakit/core.hpp"
#include "dakit/error.hpp"
#include "dakit/filters.hpp"
#include "dakit/learning.hpp"
#include "dakit/metrics.hpp"
#include "dakit/multifidelity.hpp"
#include "dakit/optimize.hpp"
#include "dakit/scoring.hpp"
#include "dakit/smoothers.hpp"
#include "oracles.hpp"
#include "random_programs.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace dakit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Collects "name=value" fragments into one detail string.
class Notes {
public:
    template <class T>
    Notes& add(const std::string& name, const T& value) {
        if (text_.tellp() > 0) text_ << ", ";
        text_ << name << '=' << value;
        return *this;
    }
    std::string str() const { return text_.str(); }

private:
    std::ostringstream text_;
};

std::string sci(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

Matrix m1(double x) { return Matrix::Constant(1, 1, x); }

Vector flatten_rows(const Matrix& s) {
    Vector out(s.size());
    for (Eigen::Index i = 0; i < s.rows(); ++i) out.segment(i * s.cols(), s.cols()) = s.row(i).transpose();
    return out;
}

Matrix unflatten_rows(const Vector& x, Eigen::Index d) {
    Matrix s(x.size() / d, d);
    for (Eigen::Index i = 0; i < s.rows(); ++i) s.row(i) = x.segment(i * d, d).transpose();
    return s;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

// ---------------------------------------------------------------------------

Outcome conjugacy() {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> dd(1, 5), kk(1, 3);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const Eigen::Index d = dd(rng), k = kk(rng);
        const Matrix a = oracle::random_matrix(d, d, rng, 0.5);
        const Matrix h = oracle::random_matrix(k, d, rng);
        const Matrix sigma = oracle::random_spd(d, rng, 0.1, 1.0);
        const Matrix gamma = oracle::random_spd(k, rng, 0.1, 1.0);
        const Gaussian prior{oracle::random_vector(d, rng), oracle::random_spd(d, rng)};
        const Vector y = oracle::random_vector(k, rng);

        const auto s = filters::kalman_step(prior, a, h, sigma, gamma, y);
        const Gaussian info = gaussian_posterior_linear(s.forecast, h, gamma, y);
        const auto [mean, cov] = oracle::condition_joint(s.forecast.mean, s.forecast.cov, h, gamma, y);
        worst = std::max({worst, max_abs(s.analysis.mean - info.mean), max_abs(s.analysis.cov - info.cov),
                          max_abs(s.analysis.mean - mean), max_abs(s.analysis.cov - cov)});
    }
    return {worst <= 1e-10, Notes().add("max_err", sci(worst)).str()};
}

Outcome steady_gain() {
    const auto ss = filters::steady_state_gain(m1(0.5), m1(1), m1(1), m1(1));
    // Forecast variance solves c^2 - 0.25 c - 1 = 0 and K = c / (c + 1).
    const double c = (0.25 + std::sqrt(0.0625 + 4.0)) / 2.0;
    const double k_root = c / (c + 1.0);
    const double residual = filters::riccati_residual(m1(0.5), m1(1), m1(1), m1(1), ss.forecast_cov);
    const double k = ss.gain(0, 0);
    const bool ok = std::abs(k - k_root) <= 1e-8 && std::abs(k - 0.53112887) <= 1e-8 && residual <= 1e-10;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10f", k);
    return {ok, Notes().add("K", buf).add("root_err", sci(std::abs(k - k_root))).add("residual", sci(residual)).str()};
}

Outcome gain_learning() {
    const double k_inf = filters::steady_state_gain(m1(0.5), m1(1), m1(1), m1(1)).gain(0, 0);
    const learning::GainResult r = learning::learn_fixed_gain(m1(0.5), m1(1), m1(1), m1(1), m1(1), 500);
    const double err = std::abs(r.gain(0, 0) - k_inf);
    return {err <= 1e-3, Notes().add("K", r.gain(0, 0)).add("err", sci(err)).str()};
}

Outcome ensemble_consistency() {
    const auto model = make_scalar_model(0.9, 1.0, 0.1, 0.1);
    double enkf_rmse = 0.0, bpf_rmse = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto [truth, obs] = simulate(model, 50, RngStream(500, s));
        const auto kf = filters::kalman_run(model, obs);
        filters::EnKFConfig ec;
        ec.rng = RngStream(600, s);
        filters::ParticleConfig pc;
        pc.rng = RngStream(700, s);
        enkf_rmse += std::sqrt((filters::enkf_run(model, obs, 4096, ec).mean - kf.mean).squaredNorm() / 50.0) / 20.0;
        bpf_rmse += std::sqrt((filters::bpf_run(model, obs, 4096, pc).mean - kf.mean).squaredNorm() / 50.0) / 20.0;
    }

    auto spread = [](const Vector& x) { return (x.array() - x.mean()).square().mean(); };
    int wins = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Ensemble e = gaussian_sample(model.init, 500, RngStream(800, s));
        const WeightedEnsemble start{std::move(e.members), Vector::Constant(500, 1.0 / 500.0)};
        const auto [truth, obs] = simulate(model, 1, RngStream(850, s));
        filters::ParticleConfig cfg;
        cfg.rng = RngStream(900, s);
        filters::ParticleStepInfo bi, oi;
        const Vector y = obs.obs.row(0).transpose();
        filters::bpf_step(start, model, y, cfg, 1, &bi);
        filters::opf_step(start, model, y, cfg, 1, &oi);
        wins += spread(oi.log_likelihood) <= spread(bi.log_likelihood);
    }
    const bool ok = enkf_rmse <= 0.05 && bpf_rmse <= 0.05 && wins >= 90;
    return {ok, Notes().add("enkf_rmse", sci(enkf_rmse)).add("bpf_rmse", sci(bpf_rmse)).add("opf_wins", wins).str()};
}

// Total variation between two scalar Gaussians from the crossing points of
// their densities: on each interval between crossings p - q keeps its sign.
double tv_exact(double mp, double vp, double mq, double vq) {
    const double a = 0.5 / vq - 0.5 / vp;
    const double b = mp / vp - mq / vq;
    const double c = 0.5 * mq * mq / vq - 0.5 * mp * mp / vp - 0.5 * std::log(vp / vq);
    std::vector<double> cuts;
    if (std::abs(a) < 1e-14) {
        if (b != 0.0) cuts.push_back(-c / b);
    } else {
        const double disc = b * b - 4 * a * c;
        if (disc > 0) {
            cuts.push_back((-b - std::sqrt(disc)) / (2 * a));
            cuts.push_back((-b + std::sqrt(disc)) / (2 * a));
        }
    }
    std::sort(cuts.begin(), cuts.end());
    auto cdf_p = [&](double x) { return std::isinf(x) ? (x > 0 ? 1.0 : 0.0) : oracle::normal_cdf((x - mp) / std::sqrt(vp)); };
    auto cdf_q = [&](double x) { return std::isinf(x) ? (x > 0 ? 1.0 : 0.0) : oracle::normal_cdf((x - mq) / std::sqrt(vq)); };
    cuts.insert(cuts.begin(), -INFINITY);
    cuts.push_back(INFINITY);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
        total += std::abs((cdf_p(cuts[i + 1]) - cdf_p(cuts[i])) - (cdf_q(cuts[i + 1]) - cdf_q(cuts[i])));
    return 0.5 * total;
}

double hellinger_exact(double mp, double vp, double mq, double vq) {
    const double bc = std::sqrt(2 * std::sqrt(vp * vq) / (vp + vq)) * std::exp(-0.25 * (mp - mq) * (mp - mq) / (vp + vq));
    return std::sqrt(std::max(0.0, 1.0 - bc));
}

double kl_quadrature(double mp, double vp, double mq, double vq) {
    return oracle::midpoint(
        [&](double x) {
            const double lr = -0.5 * (x - mp) * (x - mp) / vp + 0.5 * (x - mq) * (x - mq) / vq - 0.5 * std::log(vp / vq);
            return oracle::normal_pdf(x, mp, vp) * lr;
        },
        -40.0, 40.0, 400000);
}

double chi2_quadrature(double mp, double vp, double mq, double vq) {
    // p^2 / q is an unnormalized Gaussian with precision 2/vp - 1/vq; when vq
    // is near vp / 2 it sits far out and wide, so the window follows it.
    const double prec = 2.0 / vp - 1.0 / vq;
    const double centre = (2.0 * mp / vp - mq / vq) / prec, width = 40.0 / std::sqrt(prec);
    const double lo = std::min(-40.0, centre - width), hi = std::max(40.0, centre + width);
    return oracle::midpoint(
        [&](double x) {
            const double lp = -0.5 * (x - mp) * (x - mp) / vp - 0.5 * std::log(2 * std::numbers::pi * vp);
            const double lq = -0.5 * (x - mq) * (x - mq) / vq - 0.5 * std::log(2 * std::numbers::pi * vq);
            return std::exp(2 * lp - lq) - 2 * std::exp(lp) + std::exp(lq);
        },
        lo, hi, static_cast<int>((hi - lo) / 2e-4));
}

Outcome metric_inequalities() {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> um(-2.0, 2.0), uv(0.4, 2.0);
    auto scalar = [](double m, double v) { return Gaussian{Vector::Constant(1, m), m1(v)}; };
    double min_slack = INFINITY, grid_err = 0.0, closed_err = 0.0;
    int checked = 0;
    while (checked < 100) {
        const double mp = um(rng), vp = uv(rng), mq = um(rng), vq = uv(rng);
        // chi^2(p || q) is finite only when 2 vq > vp.
        if (2.0 * vq <= vp * 1.05) continue;
        ++checked;
        const auto p = metrics::GridDensity::gaussian(mp, vp, -25.0, 25.0, 30000);
        const auto q = metrics::GridDensity::gaussian(mq, vq, -25.0, 25.0, 30000);
        const double tv = metrics::tv_grid(p, q), h = metrics::hellinger_grid(p, q);
        const double kl = metrics::kl_gaussian(scalar(mp, vp), scalar(mq, vq));
        const double chi2 = metrics::chi2_gaussian(scalar(mp, vp), scalar(mq, vq));
        min_slack = std::min({min_slack, h - tv / std::sqrt(2.0), std::sqrt(tv) - h, 0.5 * kl - h * h, kl - tv * tv,
                              std::log(chi2 + 1.0) - kl, chi2 - std::log(chi2 + 1.0)});
        grid_err = std::max({grid_err, std::abs(tv - tv_exact(mp, vp, mq, vq)),
                             std::abs(h - hellinger_exact(mp, vp, mq, vq))});
        // chi^2 grows like exp((mp - mq)^2 / (2 vq - vp)) and reaches 1e50 and
        // more near the finiteness boundary, so errors are scaled by the
        // value once it exceeds one.
        if (checked % 10 == 0) {
            const double kq = kl_quadrature(mp, vp, mq, vq), cq = chi2_quadrature(mp, vp, mq, vq);
            closed_err = std::max({closed_err, std::abs(kl - kq) / std::max(1.0, std::abs(kq)),
                                   std::abs(chi2 - cq) / std::max(1.0, std::abs(cq))});
        }
    }
    const bool ok = min_slack >= -1e-8 && grid_err <= 1e-6 && closed_err <= 1e-6;
    return {ok, Notes()
                    .add("min_slack", sci(min_slack))
                    .add("grid_vs_exact", sci(grid_err))
                    .add("closed_vs_quadrature", sci(closed_err))
                    .str()};
}

double crps_quadrature(double m, double s, double v) {
    auto left = [&](double x) {
        const double f = oracle::normal_cdf((x - m) / s);
        return f * f;
    };
    auto right = [&](double x) {
        const double f = 1.0 - oracle::normal_cdf((x - m) / s);
        return f * f;
    };
    const double lo = std::min(v, m) - 20.0 * s - 1.0, hi = std::max(v, m) + 20.0 * s + 1.0;
    return oracle::midpoint(left, lo, v, 200000) + oracle::midpoint(right, v, hi, 200000);
}

// Variance minimizing the Gaussian CRPS at a fixed verification, found by
// golden-section search on the score itself.
double crps_argmin_variance(double m, double v) {
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = 1e-6, b = 100.0;
    for (int i = 0; i < 200; ++i) {
        const double c = b - g * (b - a), d = a + g * (b - a);
        if (scoring::crps_gaussian(m, std::sqrt(c), v) < scoring::crps_gaussian(m, std::sqrt(d), v))
            b = d;
        else
            a = c;
    }
    return 0.5 * (a + b);
}

Outcome crps_identities() {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> um(-2, 2), us(0.1, 3.0), uv(-4, 4);
    double sweep_err = 0.0;
    for (int i = 0; i < 50; ++i) {
        const double m = um(rng), s = us(rng), v = uv(rng);
        sweep_err = std::max(sweep_err, std::abs(scoring::crps_gaussian(m, s, v) - crps_quadrature(m, s, v)));
    }

    double quantile_err = 0.0;
    for (double v : {-1.3, 0.0, 0.4, 2.2}) {
        const double m = 0.2, s = 0.9;
        const scoring::Forecast f{Gaussian{Vector::Constant(1, m), m1(s * s)}};
        double integral = 0.0;
        for (int i = 0; i < 1024; ++i) integral += scoring::quantile_score(f, (i + 0.5) / 1024.0, v);
        quantile_err = std::max(quantile_err, std::abs(2.0 * integral / 1024.0 - scoring::crps_gaussian(m, s, v)));
    }

    // Spread-error ratio r = C / (v - m)^2 at the CRPS-optimal variance C.
    const double c1 = crps_argmin_variance(0.0, 1.0), c2 = crps_argmin_variance(0.0, 2.0);
    const double r2 = c2 / 4.0;
    const bool closed_form_agrees = std::abs(scoring::crps_optimal_variance(0.0, 1.0) - c1) <= 1e-6 &&
                                    std::abs(scoring::crps_optimal_variance(0.0, 2.0) - c2) <= 1e-6;
    const bool unit_error_ok = std::abs(c1 - 1.44) <= 0.02;
    const bool double_error_ok = std::abs(c2 - 1.50) <= 0.02 && std::abs(r2 - 0.38) <= 0.02;

    const bool ok = sweep_err <= 1e-6 && quantile_err <= 1e-3 && closed_form_agrees && unit_error_ok && double_error_ok;
    return {ok, Notes()
                    .add("sweep_err", sci(sweep_err))
                    .add("quantile_err", sci(quantile_err))
                    .add("C(v=1)", sci(c1))
                    .add("C(v=2)", sci(c2) + " (want 1.50)")
                    .add("r(v=2)", sci(r2) + " (want 0.38)")
                    .str()};
}

Outcome em_monotone() {
    const double sigma_true = 0.5;
    const StateSpaceModel truth = make_scalar_model(0.9, 1.0, sigma_true, 0.2, 0.0, 1.0);
    const auto [path, y] = simulate(truth, 500, RngStream(2024, 0));
    StateSpaceModel start = truth;
    start.model_noise = m1(2.0);
    start.obs_noise = m1(1.0);
    learning::EmConfig cfg;
    cfg.iters = 30;
    const learning::EmTrace t = learning::em_run(start, y, cfg);
    double worst_drop = 0.0;
    for (std::size_t i = 1; i < t.loglik.size(); ++i) worst_drop = std::max(worst_drop, t.loglik[i - 1] - t.loglik[i]);
    const double rel = std::abs(t.model_noise.back()(0, 0) / sigma_true - 1.0);
    const bool ok = t.loglik.size() == 31 && worst_drop <= 1e-10 && rel <= 0.2;
    return {ok, Notes().add("iterates", t.loglik.size()).add("worst_drop", sci(worst_drop)).add("sigma_rel_err", sci(rel)).str()};
}

Outcome autodiff_agreement() {
    using namespace dakit::programs;
    std::mt19937_64 rng(99);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const ScalarProgram prog = random_program(rng);
        const Vector x = oracle::random_vector(prog.inputs, rng);
        ad::Tape t = ad::record(
            [&](ad::Tape& tape, const std::vector<ad::Var>& in) { return program_on_tape(prog, tape, in); }, x);
        const Matrix f = ad::forward_jacobian(t, x);
        worst = std::max(worst, max_abs(f - ad::reverse_jacobian(t, x)) / (1.0 + max_abs(f)));
    }
    for (int rep = 0; rep < 40; ++rep) {
        const Vector x = oracle::random_vector(6, rng);
        ad::Tape t = ad::record(
            [rep](ad::Tape& tape, const std::vector<ad::Var>& in) { return matrix_program(rep, tape, in); }, x);
        const Matrix f = ad::forward_jacobian(t, x);
        worst = std::max(worst, max_abs(f - ad::reverse_jacobian(t, x)) / (1.0 + max_abs(f)));
    }

    // Log-likelihood gradient over dynamics, both noise factors and the
    // initial mean.
    double kf_rel = 0.0;
    for (int rep = 0; rep < 4; ++rep) {
        const Eigen::Index d = 2, k = 2;
        const StateSpaceModel m = make_linear_model(
            oracle::random_matrix(d, d, rng, 0.4), oracle::random_matrix(k, d, rng), oracle::random_spd(d, rng, 0.1, 0.8),
            oracle::random_spd(k, rng, 0.1, 0.8), Gaussian{oracle::random_vector(d, rng), oracle::random_spd(d, rng, 0.2, 1.0)});
        const auto [p, y] = simulate(m, 15, RngStream(static_cast<std::uint64_t>(rep), 2));
        learning::KfFamily fam{m, {}};
        fam.layout.add("dynamics", learning::BlockKind::free, d, d)
            .add("model_noise", learning::BlockKind::log_cholesky, d, d)
            .add("obs_noise", learning::BlockKind::log_cholesky, k, k)
            .add("init_mean", learning::BlockKind::free, d, 1);
        const Vector theta = fam.encode(m) + oracle::random_vector(fam.layout.size(), rng, 0.1);
        ad::Tape tape = ad::record(learning::kf_loglik_program(fam, y), theta);
        const Vector grad = ad::reverse_gradient(tape, theta);
        Vector fd(theta.size());
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            Vector up = theta, dn = theta;
            up(i) += 1e-5;
            dn(i) -= 1e-5;
            fd(i) = (learning::kf_loglik(fam.model(up), y) - learning::kf_loglik(fam.model(dn), y)) / 2e-5;
        }
        kf_rel = std::max(kf_rel, (grad - fd).norm() / grad.norm());
    }

    double fourdvar_rel = 0.0;
    const Matrix eye = Matrix::Identity(3, 3);
    const auto lorenz = make_lorenz63_model(Matrix{{1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}}, 0.05 * eye,
                                            0.5 * Matrix::Identity(2, 2), Gaussian{Vector{{1.0, 2.0, 20.0}}, eye});
    for (auto mode : {smoothers::Constraint::weak, smoothers::Constraint::strong}) {
        for (int steps : {1, 3, 5}) {
            const auto [truth, obs] = simulate(lorenz, steps, RngStream(50 + static_cast<std::uint64_t>(steps)));
            const smoothers::FourDVarProblem p{lorenz, obs, mode};
            const bool weak = mode == smoothers::Constraint::weak;
            const Trajectory v = smoothers::rollout(lorenz, Vector{{1.2, 1.8, 19.5}}, steps);
            Vector x = weak ? flatten_rows(v.states) : Vector(v.state(0));
            if (weak) x += 0.01 * Vector::LinSpaced(x.size(), -1.0, 1.0);
            ad::Tape tape = ad::record(smoothers::fourdvar_program(p), x);
            const Vector g = ad::reverse_gradient(tape, x);
            auto f = [&](const Vector& z) {
                return smoothers::fourdvar_objective(
                    p, Trajectory{weak ? unflatten_rows(z, 3) : Matrix(smoothers::rollout(lorenz, z, steps).states)});
            };
            Vector fd(x.size());
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                Vector up = x, dn = x;
                const double h = 1e-6 * std::max(1.0, std::abs(x(i)));
                up(i) += h;
                dn(i) -= h;
                fd(i) = (f(up) - f(dn)) / (2.0 * h);
            }
            fourdvar_rel = std::max(fourdvar_rel, (g - fd).norm() / fd.norm());
        }
    }
    const bool ok = worst <= 1e-12 && kf_rel <= 1e-5 && fourdvar_rel <= 1e-5;
    return {ok, Notes()
                    .add("fwd_vs_rev", sci(worst))
                    .add("kf_loglik_rel", sci(kf_rel))
                    .add("fourdvar_rel", sci(fourdvar_rel))
                    .str()};
}

Outcome fourdvar_oracle() {
    std::mt19937_64 rng(43);
    double weak_err = 0.0;
    struct Case {
        Matrix a, h, sigma, gamma;
        Gaussian prior;
        smoothers::FourDVarProblem problem;
    };
    auto make_case = [&](Eigen::Index d, Eigen::Index k, int steps) {
        Case c;
        c.a = oracle::random_matrix(d, d, rng, 0.6);
        c.h = oracle::random_matrix(k, d, rng);
        c.sigma = oracle::random_spd(d, rng, 0.1, 0.5);
        c.gamma = oracle::random_spd(k, rng, 0.1, 0.5);
        c.prior = Gaussian{oracle::random_vector(d, rng), oracle::random_spd(d, rng, 0.5, 2.0)};
        const auto model = make_linear_model(c.a, c.h, c.sigma, c.gamma, c.prior);
        const auto [truth, obs] = simulate(model, steps, RngStream(rng()));
        c.problem = smoothers::FourDVarProblem{model, obs, smoothers::Constraint::weak};
        return c;
    };
    for (int d = 1; d <= 3; ++d) {
        for (int steps = 1; steps <= 10; ++steps) {
            const Case c = make_case(d, std::min(d, 2), steps);
            const auto [m, cov] = oracle::trajectory_prior(c.a, c.sigma, c.prior.mean, c.prior.cov, steps);
            const Vector expect = oracle::condition_joint(m, cov, oracle::stacked_obs_operator(c.h, steps),
                                                          oracle::block_diag_repeat(c.gamma, steps),
                                                          flatten_rows(c.problem.obs.obs))
                                      .first;
            const auto res = smoothers::fourdvar_solve(c.problem, Trajectory{Matrix::Zero(steps + 1, d)}, 1e-11);
            weak_err = std::max(weak_err, max_abs(flatten_rows(res.map.states) - expect));
        }
    }

    // Weak solutions approach the strong one as the model noise shrinks.
    double limit_err = 0.0;
    bool shrinking = true;
    for (int rep = 0; rep < 5; ++rep) {
        Case c = make_case(2, 1, 6);
        smoothers::FourDVarProblem strong = c.problem;
        strong.mode = smoothers::Constraint::strong;
        const Trajectory init{Matrix::Zero(7, 2)};
        const Matrix s = smoothers::fourdvar_solve(strong, init, 1e-10).map.states;
        double previous = INFINITY;
        for (double noise : {1e-4, 1e-6, 1e-8}) {
            smoothers::FourDVarProblem weak = c.problem;
            weak.model.model_noise = noise * Matrix::Identity(2, 2);
            const double gap = max_abs(smoothers::fourdvar_solve(weak, init, 1e-6).map.states - s);
            shrinking = shrinking && gap < previous;
            previous = gap;
        }
        limit_err = std::max(limit_err, previous);
    }
    const bool ok = weak_err <= 1e-8 && limit_err <= 1e-4 && shrinking;
    return {ok, Notes()
                    .add("weak_vs_conditional", sci(weak_err))
                    .add("strong_vs_limit", sci(limit_err))
                    .add("gap_shrinks", shrinking ? "yes" : "no")
                    .str()};
}

Outcome mfmc() {
    namespace mf = multifidelity;
    constexpr double rho = 0.95;
    constexpr int reps = 1000;
    // Inputs (u, e) ~ N(0, I). High fidelity 1 + u, surrogate rho u + sqrt(1 - rho^2) e.
    const VectorMap hi = [](const Vector& v) { return Vector::Constant(1, 1.0 + v(0)); };
    const mf::FidelityModel lo{"surrogate",
                               [](const Vector& v) {
                                   return Vector::Constant(1, rho * v(0) + std::sqrt(1 - rho * rho) * v(1));
                               },
                               0.01, std::nullopt};
    mf::FidelityStats stats;
    stats.sigma_hi = 1.0;
    stats.sigma = Vector::Ones(1);
    stats.rho = Vector::Constant(1, rho);
    const std::vector<double> costs{1.0, 0.01};
    const double budget = 24.0;
    const mf::MfmcPlan plan = mf::mosap_allocate(costs, stats, budget);
    const Eigen::Index hi_only_n = static_cast<Eigen::Index>(std::floor(budget / costs[0]));
    const Eigen::Index draws = std::max(plan.sizes.back(), hi_only_n);

    std::vector<double> est(reps), base(reps);
    for (int r = 0; r < reps; ++r) {
        RngStream stream = RngStream(3, 0).derive("inputs", static_cast<std::uint64_t>(r));
        Matrix in(draws, 2);
        for (Eigen::Index i = 0; i < draws; ++i) in.row(i) = stream.normal_vector(2).transpose();
        est[r] = mf::mfmc_mean(hi, {lo}, plan, in).mean(0);
        base[r] = 1.0 + in.col(0).head(hi_only_n).mean();
    }
    auto moments = [](const std::vector<double>& x) {
        double m = 0, v = 0;
        for (double xi : x) m += xi / double(x.size());
        for (double xi : x) v += (xi - m) * (xi - m) / double(x.size() - 1);
        return std::pair{m, v};
    };
    const auto [mean, var] = moments(est);
    const double hi_var = moments(base).second;
    const double predicted = mf::mfmc_variance(stats, plan.sizes, plan.weights);
    const double z = std::abs(mean - 1.0) / std::sqrt(var / reps);
    const double var_ratio = var / predicted;
    const double reduction = 1.0 - var / hi_var;

    std::mt19937_64 rng(13);
    const auto comb = mf::mf_cov_combine({{oracle::random_spd(2, rng), 1.0}, {oracle::random_spd(2, rng), 3.0}});
    const bool weights_exact = comb.weights.size() == 2 && comb.weights(0) == 0.75 && comb.weights(1) == 0.25;

    const bool ok = z <= 4.0 && std::abs(var_ratio - 1.0) <= 0.15 && reduction >= 0.2 && weights_exact;
    std::ostringstream plan_text;
    plan_text << plan.sizes[0] << '/' << plan.sizes[1];
    return {ok, Notes()
                    .add("plan", plan_text.str())
                    .add("bias_se", sci(z))
                    .add("var/predicted", sci(var_ratio))
                    .add("reduction_vs_hi_only", sci(reduction))
                    .add("cov_weights", sci(comb.weights(0)) + "/" + sci(comb.weights(1)))
                    .str()};
}

Outcome eki() {
    double worst_span = 0.0;
    bool moved = true;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        std::mt19937_64 rng(30 + seed);
        const Eigen::Index d = 6, k = 4, n = 4;
        const Matrix g = oracle::random_matrix(k, d, rng);
        const Vector y = oracle::random_vector(k, rng);
        optimize::EkiConfig cfg;
        cfg.iters = 30;
        cfg.rng = RngStream(seed, 0);
        const auto t = optimize::eki_run([&](const Vector& u) -> Vector { return g * u; }, y,
                                         0.1 * Matrix::Identity(k, k), Gaussian{Vector::Zero(d), Matrix::Identity(d, d)},
                                         n, cfg);
        const Matrix& u0 = t.ensembles[0].members;
        const Vector base = u0.colwise().mean().transpose();
        const Matrix span = (u0.rowwise() - base.transpose()).transpose();
        const double spread = span.norm();
        const auto qr = span.colPivHouseholderQr();
        for (const Ensemble& e : t.ensembles)
            for (Eigen::Index m = 0; m < n; ++m) {
                const Vector off = e.members.row(m).transpose() - base;
                worst_span = std::max(worst_span, (off - span * qr.solve(off)).norm() / spread);
            }
        moved = moved && (t.ensembles.back().members - u0).norm() > 1e-3;
    }

    // Twenty-seed average of the ensemble-mean misfit over the descent phase.
    std::mt19937_64 rng(41);
    const Eigen::Index d = 5, k = 3;
    const int iters = 12;
    const Matrix g = oracle::random_matrix(k, d, rng);
    const Vector y = g * oracle::random_vector(d, rng);
    std::vector<double> avg(iters + 1, 0.0);
    for (std::uint64_t s = 1; s <= 20; ++s) {
        optimize::EkiConfig cfg;
        cfg.iters = iters;
        cfg.rng = RngStream(s, 0);
        const auto t = optimize::eki_run([&](const Vector& u) -> Vector { return g * u; }, y,
                                         0.05 * Matrix::Identity(k, k), Gaussian{Vector::Zero(d), Matrix::Identity(d, d)},
                                         50, cfg);
        for (int j = 0; j <= iters; ++j) avg[j] += t.mean_misfit[j] / 20.0;
    }
    int increases = 0;
    for (int j = 0; j < iters; ++j) increases += avg[j + 1] > avg[j];
    const bool ok = worst_span <= 1e-8 && moved && increases == 0;
    return {ok, Notes()
                    .add("span_residual/spread", sci(worst_span))
                    .add("misfit_increases", increases)
                    .add("misfit", sci(avg.front()) + "->" + sci(avg.back()))
                    .str()};
}

Outcome gd_contraction() {
    std::mt19937_64 rng(11);
    Eigen::HouseholderQR<Matrix> qr(oracle::random_matrix(4, 4, rng));
    const Matrix rot = qr.householderQ();
    const Vector ev{{1.0, 2.0, 1.5, 1.2}};
    const Matrix q = rot * ev.asDiagonal() * rot.transpose();
    const Vector c = oracle::random_vector(4, rng);
    optimize::Objective f;
    f.value = [&](const Vector& x) { return 0.5 * (x - c).dot(q * (x - c)); };
    f.gradient = [&](const Vector& x) -> Vector { return q * (x - c); };
    const auto t = optimize::gradient_descent(f, oracle::random_vector(4, rng, 3.0), optimize::StepRule::one_over_l(2.0), 20);
    double worst = 0.0;
    for (int j = 0; j < 20 && j + 1 < int(t.values.size()); ++j) worst = std::max(worst, t.values[j + 1] / t.values[j]);
    const bool ok = t.steps() == 20 && worst <= 0.5 * (1 + 1e-12);
    return {ok, Notes().add("steps", t.steps()).add("worst_ratio", sci(worst)).str()};
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int shell(const fs::path& dir, const std::string& args) {
    const std::string cmd = "cd '" + dir.string() + "' && '" DAKIT_CLI_PATH "' " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
    const fs::path golden = DAKIT_GOLDEN_DIR;
    const fs::path root = fs::temp_directory_path() / ("dakit_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    int runs = 0, mismatches = 0, failures = 0;
    for (int execution = 0; execution < 2; ++execution) {
        for (int threads : {1, 2, 4}) {
            const fs::path dir = root / ("run" + std::to_string(execution) + "_t" + std::to_string(threads));
            fs::create_directories(dir);
            fs::copy_file(golden / "config.json", dir / "config.json");
            const std::string t = " --threads " + std::to_string(threads);
            failures += shell(dir, "generate --config config.json --out-dir ." + t) != 0;
            failures += shell(dir, "filter --config config.json --out-dir enkf" + t) != 0;
            failures += shell(dir, "filter --config config.json --algorithm bpf --ensemble-size 200 --out-dir bpf" + t) != 0;
            for (const auto& [made, expect] : std::vector<std::pair<std::string, std::string>>{
                     {"truth.csv", "truth.csv"},
                     {"observations.csv", "observations.csv"},
                     {"enkf/filter.csv", "filter_enkf.csv"},
                     {"bpf/filter.csv", "filter_bpf.csv"}})
                mismatches += slurp(dir / made) != slurp(golden / expect);
            ++runs;
        }
    }
    fs::remove_all(root);
    const bool ok = failures == 0 && mismatches == 0;
    return {ok, Notes().add("runs", runs).add("command_failures", failures).add("byte_mismatches", mismatches).str()};
}

struct Check {
    int id;
    const char* name;
    std::function<Outcome()> run;
    double time_limit;  // seconds, 0 for none
};

}  // namespace

int main(int argc, char** argv) {
    std::set<int> expected_failures;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--expect-fail" && i + 1 < argc) {
            std::stringstream list(argv[++i]);
            for (std::string item; std::getline(list, item, ',');)
                if (!item.empty()) expected_failures.insert(std::stoi(item));
        } else {
            std::cerr << "usage: dakit_acceptance [--expect-fail N[,M...]]\n";
            return 64;
        }
    }

    const std::vector<Check> checks{
        {1, "Kalman conjugacy oracle", conjugacy, 5.0},
        {2, "steady-state gain", steady_gain, 0.0},
        {3, "fixed-gain learning", gain_learning, 30.0},
        {4, "EnKF/PF consistency", ensemble_consistency, 120.0},
        {5, "metric inequalities", metric_inequalities, 0.0},
        {6, "CRPS identities", crps_identities, 0.0},
        {7, "EM monotonicity", em_monotone, 0.0},
        {8, "autodiff correctness", autodiff_agreement, 0.0},
        {9, "4DVar oracle", fourdvar_oracle, 0.0},
        {10, "multifidelity Monte Carlo", mfmc, 0.0},
        {11, "EKI span and misfit", eki, 0.0},
        {12, "gradient descent contraction", gd_contraction, 0.0},
        {13, "determinism", determinism, 0.0},
    };

    std::set<int> failed;
    for (const Check& c : checks) {
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.time_limit > 0 && secs > c.time_limit) {
            out.pass = false;
            out.detail += ", over time limit " + sci(c.time_limit) + " s";
        }
        if (!out.pass) failed.insert(c.id);
        std::printf("%s %2d %-30s %s (%.2f s)\n", out.pass ? "PASS" : "FAIL", c.id, c.name, out.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%zu/%zu passed\n", checks.size() - failed.size(), checks.size());
    if (failed != expected_failures) {
        std::printf("failing set differs from the expected set\n");
        return 1;
    }
    return 0;
}
