#include "dakit/error.hpp"
#include "dakit/optimize.hpp"
#include "dakit/parallel.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace dakit;
using namespace dakit::optimize;

namespace {

Vector v1(double x) { return Vector::Constant(1, x); }
Matrix m1(double x) { return Matrix::Constant(1, 1, x); }

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind{};
}

// f(x) = 1/2 (x - c)^T Q (x - c)
Objective quadratic(const Matrix& q, const Vector& c) {
    Objective o;
    o.value = [q, c](const Vector& x) { return 0.5 * (x - c).dot(q * (x - c)); };
    o.gradient = [q, c](const Vector& x) -> Vector { return q * (x - c); };
    o.hessian = [q](const Vector&) -> Matrix { return q; };
    return o;
}

Objective quartic() {
    Objective o;
    o.value = [](const Vector& x) { return std::pow(x(0), 4); };
    o.gradient = [](const Vector& x) { return v1(4.0 * std::pow(x(0), 3)); };
    o.hessian = [](const Vector& x) { return m1(12.0 * x(0) * x(0)); };
    return o;
}

}  // namespace

TEST(Objective, DerivativeCheckAcceptsConsistentAndFlagsWrong) {
    std::mt19937_64 rng(3);
    const Matrix q = oracle::random_spd(3, rng);
    const Vector c = oracle::random_vector(3, rng);
    Objective o = quadratic(q, c);
    o.residual = [&](const Vector& x) -> Vector { return Vector(x.array().square() - 1.0); };
    o.residual_jacobian = [](const Vector& x) -> Matrix { return Matrix((2.0 * x).asDiagonal()); };
    const std::vector<Vector> probes{oracle::random_vector(3, rng), oracle::random_vector(3, rng)};
    EXPECT_LE(derivative_check(o, probes), 1e-4);
    o.gradient = [&](const Vector& x) -> Vector { return 1.1 * (q * (x - c)); };
    EXPECT_GT(derivative_check(o, probes), 1e-2);
}

TEST(GradientDescent, ExactStepOnScaledQuadratic) {
    const double mu = 3.0;
    const Trace t = gradient_descent(quadratic(m1(mu), v1(0.0)), v1(5.0), StepRule::fixed(1.0 / mu), 3);
    // The second gradient is exactly zero, which ends the run.
    ASSERT_EQ(t.steps(), 1);
    EXPECT_EQ(t.reason, StopReason::converged);
    EXPECT_EQ(t.iterates[1](0), 0.0);
    EXPECT_EQ(t.values[1], 0.0);
}

TEST(GradientDescent, GapContractsByHalfForConditionNumberTwo) {
    // mu = 1, L = 2 and alpha = 1/L: the bound is (1 - mu/L) = 1/2 per step.
    std::mt19937_64 rng(11);
    Eigen::HouseholderQR<Matrix> qr(oracle::random_matrix(4, 4, rng));
    const Matrix rot = qr.householderQ();
    Vector ev(4);
    ev << 1.0, 2.0, 1.5, 1.2;
    const Matrix q = rot * ev.asDiagonal() * rot.transpose();
    const Vector c = oracle::random_vector(4, rng);
    const Trace t = gradient_descent(quadratic(q, c), oracle::random_vector(4, rng, 3.0), StepRule::one_over_l(2.0), 20);
    ASSERT_EQ(t.steps(), 20);
    for (int j = 0; j < 20; ++j) {
        EXPECT_LE(t.values[j + 1], 0.5 * t.values[j] + 1e-15) << j;
        EXPECT_LE(t.values[j + 1], t.values[j]);
    }
}

TEST(GradientDescent, StationaryStartStaysPut) {
    const Vector c = Vector::LinSpaced(3, -1.0, 1.0);
    const Trace t = gradient_descent(quadratic(Matrix::Identity(3, 3), c), c, StepRule::fixed(0.3), 5);
    for (const Vector& x : t.iterates) EXPECT_EQ((x - c).norm(), 0.0);
}

TEST(GradientDescent, NonFiniteAbortsWithTrace) {
    // Step far above 2/L diverges geometrically and eventually overflows.
    const Trace t = gradient_descent(quadratic(m1(1.0), v1(0.0)), v1(1.0), StepRule::fixed(1e100), 50);
    EXPECT_TRUE(t.aborted);
    EXPECT_LT(t.steps(), 50);
    EXPECT_GE(t.steps(), 1);
    for (double v : t.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(GradientDescent, ArmijoDescendsOnRosenbrock) {
    Objective o;
    o.value = [](const Vector& x) { return std::pow(1 - x(0), 2) + 100 * std::pow(x(1) - x(0) * x(0), 2); };
    o.gradient = [](const Vector& x) {
        Vector g(2);
        g(0) = -2 * (1 - x(0)) - 400 * x(0) * (x(1) - x(0) * x(0));
        g(1) = 200 * (x(1) - x(0) * x(0));
        return g;
    };
    const Trace t = gradient_descent(o, Vector::Constant(2, -1.0), StepRule::armijo(1.0), 200);
    EXPECT_FALSE(t.aborted);
    for (std::size_t j = 1; j < t.values.size(); ++j) EXPECT_LT(t.values[j], t.values[j - 1]);
    EXPECT_LT(t.values.back(), 0.1 * t.values.front());
}

TEST(GradientDescent, RequiresGradient) {
    Objective o;
    o.value = [](const Vector&) { return 0.0; };
    EXPECT_EQ(kind_of([&] { gradient_descent(o, v1(0), StepRule::fixed(1), 1); }), ErrorKind::argument);
}

TEST(Sgd, FullBatchMatchesGradientDescent) {
    std::mt19937_64 rng(5);
    const Eigen::Index n = 7;
    const Matrix z = oracle::random_matrix(n, 2, rng);
    const TermGradient term = [&](const Vector& x, std::size_t i) -> Vector {
        return x - z.row(static_cast<Eigen::Index>(i)).transpose();
    };
    Objective full;
    full.gradient = [&](const Vector& x) -> Vector { return x - z.colwise().mean().transpose(); };
    const Vector x0 = oracle::random_vector(2, rng);
    const Trace a = sgd(term, n, x0, n, Schedule{0.3, false}, RngStream(1, 0), 4);
    const Trace b = sgd(term, n, x0, n, Schedule{0.3, false}, RngStream(99, 7), 4);
    const Trace g = gradient_descent(full, x0, StepRule::fixed(0.3), 4);
    for (int j = 0; j <= 4; ++j) {
        EXPECT_LE((a.iterates[j] - g.iterates[j]).norm(), 1e-14);
        EXPECT_EQ((a.iterates[j] - b.iterates[j]).norm(), 0.0);
    }
}

TEST(Sgd, BatchIndicesReproducibleAndInRange) {
    const RngStream rng(2024, 0);
    for (int j = 0; j < 5; ++j) {
        const auto a = sgd_batch(50, 8, rng, j);
        EXPECT_EQ(a, sgd_batch(50, 8, rng, j));
        for (std::size_t i : a) EXPECT_LT(i, 50u);
    }
    EXPECT_NE(sgd_batch(50, 8, rng, 0), sgd_batch(50, 8, RngStream(2025, 0), 0));
    EXPECT_NE(sgd_batch(50, 8, rng, 0), sgd_batch(50, 8, rng, 1));
}

TEST(Sgd, BatchesSampleWithReplacementUniformly) {
    const RngStream rng(8, 0);
    std::vector<int> counts(10, 0);
    const int steps = 20000;
    bool repeat_seen = false;
    for (int j = 0; j < steps; ++j) {
        auto idx = sgd_batch(10, 5, rng, j);
        for (std::size_t i : idx) ++counts[i];
        std::sort(idx.begin(), idx.end());
        repeat_seen = repeat_seen || std::adjacent_find(idx.begin(), idx.end()) != idx.end();
    }
    EXPECT_TRUE(repeat_seen);
    const double expect = steps * 5 / 10.0, sd = std::sqrt(steps * 5 * 0.1 * 0.9);
    for (int c : counts) EXPECT_LE(std::abs(c - expect), 5 * sd);
}

TEST(Sgd, DecayingStepReachesMinimizerStatistically) {
    // F(x, z) = 1/2 (x - z)^2 with alpha_j = 1/(1+j) and M = 1 makes x_J the
    // average of J sampled data points: unbiased for mean(z) with variance
    // var(z)/J (sampling with replacement).
    std::mt19937_64 rng(17);
    const std::size_t n = 200;
    std::vector<double> z(n);
    std::normal_distribution<double> nd(1.5, 2.0);
    for (double& v : z) v = nd(rng);
    double mean = 0, var = 0;
    for (double v : z) mean += v / n;
    for (double v : z) var += (v - mean) * (v - mean) / n;
    const TermGradient term = [&](const Vector& x, std::size_t i) { return v1(x(0) - z[i]); };
    const int iters = 4000;
    double sum = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Trace t = sgd(term, n, v1(10.0), 1, Schedule{1.0, true}, RngStream(seed, 0), iters);
        const double x = t.last()(0);
        EXPECT_LE(std::abs(x - mean), 4.5 * std::sqrt(var / iters)) << seed;
        sum += x;
    }
    EXPECT_LE(std::abs(sum / 20 - mean), 4.0 * std::sqrt(var / iters / 20));
}

TEST(Sgd, RejectsEmptyTermSet) {
    const TermGradient term = [](const Vector& x, std::size_t) { return x; };
    EXPECT_EQ(kind_of([&] { sgd(term, 0, v1(0), 1, {}, RngStream(1, 0), 1); }), ErrorKind::argument);
    EXPECT_EQ(kind_of([&] { sgd(term, 3, v1(0), 4, {}, RngStream(1, 0), 1); }), ErrorKind::argument);
}

TEST(Newton, QuadraticSolvedInOneStep) {
    std::mt19937_64 rng(4);
    const Matrix q = oracle::random_spd(5, rng);
    const Vector c = oracle::random_vector(5, rng);
    const Trace t = newton(quadratic(q, c), oracle::random_vector(5, rng, 4.0), 10, 1e-12);
    ASSERT_GE(t.steps(), 1);
    EXPECT_LE((t.iterates[1] - c).norm(), 1e-12);
    EXPECT_LE(t.steps(), 2);
}

TEST(Newton, QuarticContractsByTwoThirds) {
    // x <- x - 4x^3 / (12x^2) = 2x/3, so the gradient 4x^3 shrinks by (2/3)^3.
    const Trace t = newton(quartic(), v1(1.0), 20, 0.0);
    ASSERT_EQ(t.steps(), 20);
    for (int j = 0; j < 20; ++j) {
        const double x = t.iterates[j](0), nx = t.iterates[j + 1](0);
        EXPECT_NEAR(nx / x, 2.0 / 3.0, 1e-14);
        EXPECT_NEAR(std::pow(nx, 3) / std::pow(x, 3), 8.0 / 27.0, 1e-13);
    }
}

TEST(Newton, StationaryStartTakesNoStep) {
    const Vector c = v1(0.7);
    const Trace t = newton(quadratic(m1(2.0), c), c, 10, 1e-12);
    EXPECT_EQ(t.steps(), 0);
}

TEST(Newton, SingularHessianIsNumericError) {
    const Objective o = quadratic(Matrix::Zero(2, 2), Vector::Zero(2));
    Objective shifted = o;
    shifted.gradient = [](const Vector&) { return Vector::Ones(2); };
    EXPECT_EQ(kind_of([&] { newton(shifted, Vector::Zero(2), 3, 1e-12); }), ErrorKind::numeric);
}

TEST(GaussNewton, LinearResidualSolvedInOneStep) {
    std::mt19937_64 rng(12);
    const Matrix a = oracle::random_matrix(6, 3, rng);
    const Vector b = oracle::random_vector(6, rng);
    const Vector ls = a.colPivHouseholderQr().solve(b);
    const Trace t = gauss_newton([&](const Vector& x) -> Vector { return a * x - b; },
                                 [&](const Vector&) -> Matrix { return a; }, Vector::Zero(3), 5, 1e-12);
    ASSERT_GE(t.steps(), 1);
    EXPECT_LE((t.iterates[1] - ls).norm(), 1e-12);
}

TEST(GaussNewton, AgreesWithNewtonOnLinearResidual) {
    std::mt19937_64 rng(21);
    const Matrix a = oracle::random_matrix(5, 3, rng);
    const Vector b = oracle::random_vector(5, rng);
    Objective o;
    o.value = [&](const Vector& x) { return 0.5 * (a * x - b).squaredNorm(); };
    o.gradient = [&](const Vector& x) -> Vector { return a.transpose() * (a * x - b); };
    o.hessian = [&](const Vector&) -> Matrix { return a.transpose() * a; };
    const Vector x0 = oracle::random_vector(3, rng, 2.0);
    const Trace tn = newton(o, x0, 3, 0.0);
    const Trace tg = gauss_newton([&](const Vector& x) -> Vector { return a * x - b; },
                                  [&](const Vector&) -> Matrix { return a; }, x0, 3, 0.0);
    ASSERT_GE(std::min(tn.steps(), tg.steps()), 1);
    for (int j = 0; j <= std::min(tn.steps(), tg.steps()); ++j)
        EXPECT_LE((tn.iterates[j] - tg.iterates[j]).norm(), 1e-12);
}

TEST(GaussNewton, ScalarSquareRootWithinEightSteps) {
    const Trace t = gauss_newton([](const Vector& x) { return v1(x(0) * x(0) - 1.0); },
                                 [](const Vector& x) { return m1(2.0 * x(0)); }, v1(2.0), 8, 0.0);
    EXPECT_LE(t.steps(), 8);
    EXPECT_LE(std::abs(t.last()(0) - 1.0), 1e-10);
    // The undamped scalar step is x <- x - (x^2 - 1)/(2x), Newton's root iteration.
    double x = 2.0;
    for (int j = 1; j <= t.steps(); ++j) {
        x = x - (x * x - 1.0) / (2.0 * x);
        EXPECT_NEAR(t.iterates[j](0), x, 1e-15);
    }
}

TEST(GaussNewton, RankDeficiencyNeedsDamping) {
    const auto residual = [](const Vector& x) { return v1(x(0) + x(1) - 1.0); };
    const auto jac = [](const Vector&) { return Matrix::Ones(1, 2); };
    EXPECT_EQ(kind_of([&] { gauss_newton(residual, jac, Vector::Zero(2), 3, 1e-12); }), ErrorKind::numeric);
    const Trace t = gauss_newton(residual, jac, Vector::Zero(2), 50, 1e-12, 1e-3);
    EXPECT_FALSE(t.aborted);
    EXPECT_LE(std::abs(residual(t.last())(0)), 1e-9);
}

TEST(GaussNewton, DampedIterationDecreasesMisfit) {
    // Exponential fit y = p0 exp(p1 t) from a poor start.
    const Vector ts = Vector::LinSpaced(10, 0.0, 1.0);
    const Vector ys = (2.0 * (-1.3 * ts.array()).exp()).matrix();
    const auto residual = [&](const Vector& p) -> Vector { return (p(0) * (p(1) * ts.array()).exp()).matrix() - ys; };
    const auto jac = [&](const Vector& p) -> Matrix {
        Matrix j(ts.size(), 2);
        j.col(0) = (p(1) * ts.array()).exp().matrix();
        j.col(1) = (p(0) * ts.array() * (p(1) * ts.array()).exp()).matrix();
        return j;
    };
    Vector p0(2);
    p0 << 0.1, 3.0;
    const Trace t = gauss_newton(residual, jac, p0, 100, 1e-12, 1.0);
    for (std::size_t j = 1; j < t.values.size(); ++j) EXPECT_LT(t.values[j], t.values[j - 1]);
    EXPECT_NEAR(t.last()(0), 2.0, 1e-8);
    EXPECT_NEAR(t.last()(1), -1.3, 1e-8);
}

TEST(Eki, ZeroForwardLeavesEnsembleUnchanged) {
    const Gaussian init{Vector::Zero(3), Matrix::Identity(3, 3)};
    EkiConfig cfg;
    cfg.iters = 5;
    cfg.rng = RngStream(4, 0);
    const EkiTrace t =
        eki_run([](const Vector&) { return Vector::Zero(2); }, Vector::Ones(2), Matrix::Identity(2, 2), init, 10, cfg);
    ASSERT_EQ(t.iterations(), 5);
    for (const Ensemble& e : t.ensembles) EXPECT_EQ((e.members - t.ensembles[0].members).norm(), 0.0);
}

TEST(Eki, LinearForwardStaysInInitialAffineSpan) {
    std::mt19937_64 rng(31);
    const Eigen::Index d = 6, k = 4, n = 4;  // the span has dimension n - 1 < d
    const Matrix g = oracle::random_matrix(k, d, rng);
    const Vector y = oracle::random_vector(k, rng);
    EkiConfig cfg;
    cfg.iters = 30;
    cfg.rng = RngStream(8, 0);
    const EkiTrace t = eki_run([&](const Vector& u) -> Vector { return g * u; }, y, 0.1 * Matrix::Identity(k, k),
                               Gaussian{Vector::Zero(d), Matrix::Identity(d, d)}, n, cfg);
    const Matrix& u0 = t.ensembles[0].members;
    const Vector base = u0.colwise().mean().transpose();
    const Matrix span = (u0.rowwise() - base.transpose()).transpose();  // d x n
    const double spread = span.norm();
    const auto qr = span.colPivHouseholderQr();
    for (const Ensemble& e : t.ensembles)
        for (Eigen::Index m = 0; m < n; ++m) {
            const Vector off = e.members.row(m).transpose() - base;
            const Vector proj = span * qr.solve(off);
            EXPECT_LE((off - proj).norm(), 1e-8 * spread);
        }
    // Something actually moved.
    EXPECT_GT((t.ensembles.back().members - u0).norm(), 1e-3);
}

TEST(Eki, ScalarLinearInversionFindsTwo) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        EkiConfig cfg;
        cfg.iters = 50;
        cfg.rng = RngStream(seed, 0);
        const EkiTrace t = eki_run([](const Vector& u) { return v1(2.0 * u(0)); }, v1(4.0), m1(1e-4),
                                   Gaussian{v1(0.0), m1(1.0)}, 20, cfg);
        EXPECT_NEAR(t.ensembles.back().members.mean(), 2.0, 0.05) << seed;
    }
}

namespace {

// Ensemble-mean misfit per iteration for a fixed underdetermined linear
// problem, averaged over `seeds` independent runs.
std::vector<double> average_misfit(int seeds, int iters) {
    std::mt19937_64 rng(41);
    const Eigen::Index d = 5, k = 3;
    const Matrix g = oracle::random_matrix(k, d, rng);
    const Matrix gamma = 0.05 * Matrix::Identity(k, k);
    const Vector y = g * oracle::random_vector(d, rng);
    std::vector<double> avg(static_cast<std::size_t>(iters) + 1, 0.0);
    for (int s = 1; s <= seeds; ++s) {
        EkiConfig cfg;
        cfg.iters = iters;
        cfg.rng = RngStream(static_cast<std::uint64_t>(s), 0);
        const EkiTrace t = eki_run([&](const Vector& u) -> Vector { return g * u; }, y, gamma,
                                   Gaussian{Vector::Zero(d), Matrix::Identity(d, d)}, 50, cfg);
        for (int j = 0; j <= iters; ++j) avg[j] += t.mean_misfit[j] / seeds;
    }
    return avg;
}

}  // namespace

TEST(Eki, MeanMisfitNonincreasingForLinearForward) {
    // Twenty seeds over the descent phase, where the misfit falls by four
    // orders of magnitude.
    const std::vector<double> avg = average_misfit(20, 12);
    for (std::size_t j = 0; j + 1 < avg.size(); ++j) EXPECT_LE(avg[j + 1], avg[j] + 1e-6) << j;
    EXPECT_LT(avg.back(), 1e-3 * avg.front());
}

TEST(Eki, ExpectedMisfitKeepsDecreasingAfterCollapse) {
    // Once the ensemble has collapsed the decrease per step is O(misfit / j),
    // below what twenty seeds resolve; the expectation itself stays monotone.
    const std::vector<double> avg = average_misfit(4000, 40);
    for (std::size_t j = 0; j + 1 < avg.size(); ++j) EXPECT_LE(avg[j + 1], avg[j] + 1e-6) << j;
}

TEST(Eki, DiscrepancyStopEndsEarly) {
    EkiConfig cfg;
    cfg.iters = 200;
    cfg.rng = RngStream(3, 0);
    cfg.discrepancy_stop = true;
    const EkiTrace t = eki_run([](const Vector& u) { return v1(2.0 * u(0)); }, v1(4.0), m1(0.01),
                               Gaussian{v1(0.0), m1(1.0)}, 20, cfg);
    EXPECT_TRUE(t.stopped_by_discrepancy);
    EXPECT_LT(t.iterations(), 200);
    EXPECT_LE(t.mean_misfit.back(), 1.0);
}

TEST(Eki, DeterministicAcrossThreadCounts) {
    const auto run = [] {
        EkiConfig cfg;
        cfg.iters = 10;
        cfg.rng = RngStream(77, 1);
        return eki_run([](const Vector& u) -> Vector { return (u.array().sin() + u.array()).matrix(); }, Vector::Ones(3),
                       0.1 * Matrix::Identity(3, 3), Gaussian{Vector::Zero(3), Matrix::Identity(3, 3)}, 32, cfg);
    };
    set_thread_count(1);
    const EkiTrace a = run();
    set_thread_count(4);
    const EkiTrace b = run();
    set_thread_count(0);
    EXPECT_EQ((a.ensembles.back().members - b.ensembles.back().members).norm(), 0.0);
}
