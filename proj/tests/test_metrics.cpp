#include "dakit/error.hpp"
#include "dakit/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace dakit;
using namespace dakit::metrics;

namespace {

Gaussian scalar(double m, double v) { return Gaussian{Vector::Constant(1, m), Matrix::Constant(1, 1, v)}; }

GridDensity gauss_grid(double m, double v, Eigen::Index cells = 20000, double lo = -30.0, double hi = 30.0) {
    return GridDensity::gaussian(m, v, lo, hi, cells);
}

SampleSet column(const std::vector<double>& v) {
    SampleSet s{Matrix(static_cast<Eigen::Index>(v.size()), 1)};
    for (std::size_t i = 0; i < v.size(); ++i) s.points(static_cast<Eigen::Index>(i), 0) = v[i];
    return s;
}

SampleSet normal_draws(Eigen::Index n, double m, double s, RngStream rng) {
    SampleSet out{Matrix(n, 1)};
    for (Eigen::Index i = 0; i < n; ++i) out.points(i, 0) = m + s * rng.normal();
    return out;
}

// KL(p||q) = int p log(p/q) with the log ratio evaluated analytically.
double kl_quadrature(double mp, double vp, double mq, double vq) {
    return oracle::midpoint([&](double x) {
        const double logratio = -0.5 * (x - mp) * (x - mp) / vp + 0.5 * (x - mq) * (x - mq) / vq - 0.5 * std::log(vp / vq);
        return oracle::normal_pdf(x, mp, vp) * logratio;
    }, -40.0, 40.0, 400000);
}

// chi^2 = int (p/q - 1)^2 q.
double chi2_quadrature(double mp, double vp, double mq, double vq) {
    return oracle::midpoint([&](double x) {
        // (p/q - 1)^2 q = p^2/q - 2p + q, with p^2/q formed in log space so
        // the far tails do not produce 0/0.
        const double lp = -0.5 * (x - mp) * (x - mp) / vp - 0.5 * std::log(2.0 * std::numbers::pi * vp);
        const double lq = -0.5 * (x - mq) * (x - mq) / vq - 0.5 * std::log(2.0 * std::numbers::pi * vq);
        return std::exp(2.0 * lp - lq) - 2.0 * std::exp(lp) + std::exp(lq);
    }, -40.0, 40.0, 400000);
}

}  // namespace

// ===========================================================================
// TV and Hellinger on grids
// ===========================================================================

TEST(GridMetrics, IdenticalDensitiesHaveZeroDistance) {
    const auto p = gauss_grid(0.3, 1.2);
    EXPECT_EQ(tv_grid(p, p), 0.0);
    EXPECT_EQ(hellinger_grid(p, p), 0.0);
}

TEST(GridMetrics, DisjointSupportsAreAtMaximalDistance) {
    auto p = GridDensity::tabulate(0.0, 4.0, 4000, [](double x) { return x < 1.0 ? 1.0 : 0.0; });
    auto q = GridDensity::tabulate(0.0, 4.0, 4000, [](double x) { return (x > 2.0 && x < 3.0) ? 1.0 : 0.0; });
    EXPECT_NEAR(tv_grid(p, q), 1.0, 1e-9);
    EXPECT_NEAR(hellinger_grid(p, q), 1.0, 1e-9);
}

TEST(GridMetrics, TvConvergesUnderRefinement) {
    const double coarse = tv_grid(gauss_grid(0.0, 1.0, 6000), gauss_grid(0.8, 1.5, 6000));
    const double fine = tv_grid(gauss_grid(0.0, 1.0, 60000), gauss_grid(0.8, 1.5, 60000));
    EXPECT_NEAR(coarse, fine, 1e-6);
}

TEST(GridMetrics, MismatchedGridsAreArgumentErrors) {
    try {
        tv_grid(gauss_grid(0.0, 1.0, 1000), gauss_grid(0.0, 1.0, 2000));
        FAIL() << "expected an argument error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::argument);
    }
}

// ===========================================================================
// KL and chi^2 closed forms
// ===========================================================================

TEST(GaussianDivergences, KlSpecialCases) {
    const Gaussian p{Vector{{1.0, -2.0, 0.5}}, Matrix::Identity(3, 3)};
    const Gaussian q{Vector::Zero(3), Matrix::Identity(3, 3)};
    EXPECT_NEAR(kl_gaussian(q, q), 0.0, 1e-15);
    EXPECT_NEAR(kl_gaussian(p, q), 0.5 * p.mean.squaredNorm(), 1e-14);
}

TEST(GaussianDivergences, KlMatchesQuadrature) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> um(-2, 2), uv(0.5, 2.0);
    for (int rep = 0; rep < 10; ++rep) {
        const double mp = um(rng), vp = uv(rng), mq = um(rng), vq = uv(rng);
        EXPECT_NEAR(kl_gaussian(scalar(mp, vp), scalar(mq, vq)), kl_quadrature(mp, vp, mq, vq), 1e-6);
    }
}

TEST(GaussianDivergences, Chi2MatchesQuadratureAndVanishesOnEquality) {
    EXPECT_EQ(chi2_gaussian(scalar(0.4, 1.1), scalar(0.4, 1.1)), 0.0);
    EXPECT_NEAR(chi2_gaussian(scalar(0.0, 1.0), scalar(0.0, 2.0)), chi2_quadrature(0.0, 1.0, 0.0, 2.0), 1e-6);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> um(-1, 1), uv(0.5, 1.5);
    for (int rep = 0; rep < 10; ++rep) {
        const double mp = um(rng), vp = uv(rng), mq = um(rng), vq = uv(rng);
        if (2.0 * vq <= vp) continue;
        EXPECT_NEAR(chi2_gaussian(scalar(mp, vp), scalar(mq, vq)), chi2_quadrature(mp, vp, mq, vq), 1e-6);
    }
}

TEST(GaussianDivergences, Chi2MultivariateMatchesScalarProduct) {
    // Independent coordinates: 1 + chi^2 factorizes over coordinates.
    const Gaussian p{Vector{{0.3, -0.2}}, Vector{{1.0, 0.7}}.asDiagonal()};
    const Gaussian q{Vector{{0.0, 0.1}}, Vector{{1.3, 0.9}}.asDiagonal()};
    const double c1 = chi2_gaussian(scalar(0.3, 1.0), scalar(0.0, 1.3));
    const double c2 = chi2_gaussian(scalar(-0.2, 0.7), scalar(0.1, 0.9));
    EXPECT_NEAR(chi2_gaussian(p, q), (1 + c1) * (1 + c2) - 1, 1e-13);
}

TEST(GaussianDivergences, Chi2IntegrabilityViolationIsDomainError) {
    try {
        chi2_gaussian(scalar(0.0, 3.0), scalar(0.0, 1.0));
        FAIL() << "expected a domain error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::domain);
    }
}

// ===========================================================================
// Wasserstein
// ===========================================================================

TEST(Wasserstein, QuantileFormSpecialCases) {
    const auto p = gauss_grid(0.0, 1.0, 4000, -12.0, 12.0);
    EXPECT_EQ(wasserstein_p_quantile(p, p, 1.0), 0.0);
    // Shifting the whole grid by c shifts every quantile by c.
    GridDensity q = p;
    q.nodes.array() += 0.75;
    EXPECT_NEAR(wasserstein_p_quantile(p, q, 1.0), 0.75, 1e-12);
    EXPECT_NEAR(wasserstein_p_quantile(p, q, 2.0), 0.75, 1e-12);
    EXPECT_NEAR(wasserstein_p_quantile(p, q, 3.5), 0.75, 1e-12);
}

TEST(Wasserstein, W1MatchesCdfDifferenceIntegral) {
    const double m1 = -0.3, s1 = 1.0, m2 = 0.9, s2 = 0.6;
    const auto p = gauss_grid(m1, s1 * s1, 8000, -12.0, 12.0);
    const auto q = gauss_grid(m2, s2 * s2, 8000, -12.0, 12.0);
    // Trapezoid rule on exact CDFs.
    const int n = 200000;
    const double lo = -12.0, hi = 12.0, h = (hi - lo) / n;
    double integral = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = lo + i * h;
        const double w = (i == 0 || i == n) ? 0.5 : 1.0;
        integral += w * std::abs(oracle::normal_cdf((x - m1) / s1) - oracle::normal_cdf((x - m2) / s2));
    }
    integral *= h;
    EXPECT_NEAR(wasserstein_p_quantile(p, q, 1.0), integral, 1e-4);
}

TEST(Wasserstein, MonotoneInExponentAndSymmetric) {
    const auto p = gauss_grid(0.0, 1.0, 4000, -12.0, 12.0);
    const auto q = gauss_grid(0.5, 2.0, 4000, -12.0, 12.0);
    EXPECT_LE(wasserstein_p_quantile(p, q, 1.0), wasserstein_p_quantile(p, q, 2.0));
    EXPECT_NEAR(wasserstein_p_quantile(p, q, 2.0), wasserstein_p_quantile(q, p, 2.0), 1e-14);
}

TEST(Wasserstein, ZeroDensityRegionIsDomainError) {
    auto p = GridDensity::tabulate(0.0, 4.0, 400, [](double x) { return (x < 1.0 || x > 3.0) ? 0.5 : 0.0; });
    try {
        wasserstein_p_quantile(p, p, 1.0);
        FAIL() << "expected a domain error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::domain);
    }
}

TEST(Wasserstein, EmpiricalSpecialCases) {
    const auto x = column({0.3, -1.0, 2.5, 0.0});
    EXPECT_EQ(wasserstein1_empirical_1d(x, x), 0.0);
    SampleSet y = x;
    y.points.array() += 1.25;
    EXPECT_NEAR(wasserstein1_empirical_1d(x, y), 1.25, 1e-15);
    EXPECT_THROW(wasserstein1_empirical_1d(x, SampleSet{Matrix(0, 1)}), Error);
}

TEST(Wasserstein, EmpiricalUnequalCountsMatchReplicatedEqualCounts) {
    // Replicating each of n points m times (and each of m points n times)
    // leaves both empirical measures unchanged and equalizes the counts.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    std::vector<double> a(7), b(4);
    for (double& v : a) v = n01(rng);
    for (double& v : b) v = 1.0 + n01(rng);
    std::vector<double> ra, rb;
    for (double v : a)
        for (std::size_t k = 0; k < b.size(); ++k) ra.push_back(v);
    for (double v : b)
        for (std::size_t k = 0; k < a.size(); ++k) rb.push_back(v);
    EXPECT_NEAR(wasserstein1_empirical_1d(column(a), column(b)), wasserstein1_empirical_1d(column(ra), column(rb)),
                1e-12);
}

TEST(Wasserstein, EmpiricalConvergesToPopulationValue) {
    double total = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        RngStream r(31, static_cast<std::uint64_t>(rep));
        total += wasserstein1_empirical_1d(normal_draws(200, 0.0, 1.0, r.derive("x")),
                                           normal_draws(200, 1.0, 1.0, r.derive("y")));
    }
    EXPECT_NEAR(total / 50.0, 1.0, 0.15);
}

// ===========================================================================
// MMD and energy distance
// ===========================================================================

TEST(Mmd, LinearKernelHandEvaluation) {
    EXPECT_DOUBLE_EQ(mmd_sq_ensemble(column({0.0, 2.0}), column({0.0, 2.0}), Kernel::linear()), -2.0);
}

TEST(Mmd, GaussianKernelTwoPointMasses) {
    const double d = 1.7, h = 0.8;
    const double expected = 2.0 - 2.0 * std::exp(-d * d / (2 * h * h));
    EXPECT_NEAR(mmd_sq_ensemble(column({0.0, 0.0}), column({d, d}), Kernel::gaussian(h)), expected, 1e-15);
}

TEST(Mmd, ConsistentAtEquality) {
    for (int rep = 0; rep < 20; ++rep) {
        RngStream r(41, static_cast<std::uint64_t>(rep));
        const double est = mmd_sq_ensemble(normal_draws(10000, 0.0, 1.0, r.derive("x")),
                                           normal_draws(10000, 0.0, 1.0, r.derive("y")), Kernel::gaussian(1.0));
        EXPECT_LE(std::abs(est), 0.01);
    }
}

TEST(Mmd, NeedsTwoSamples) {
    try {
        mmd_sq_ensemble(column({0.0}), column({0.0, 1.0}), Kernel::linear());
        FAIL() << "expected an argument error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::argument);
    }
}

TEST(Mmd, NegdistKernelReproducesEnergyDistance) {
    RngStream r(3);
    const auto x = normal_draws(30, 0.0, 1.0, r.derive("x"));
    const auto y = normal_draws(25, 0.5, 1.0, r.derive("y"));
    EXPECT_NEAR(mmd_sq_ensemble(x, y, Kernel::negdist()), energy_dist_sq_ensemble(x, y), 1e-12);
}

TEST(EnergyDistance, DiracAndSelfCases) {
    EXPECT_DOUBLE_EQ(energy_dist_sq_ensemble(column({0.0}), column({1.0})), 2.0);
    const auto x = column({0.1, 0.7, -1.3});
    const double self = energy_dist_sq_ensemble(x, x);
    EXPECT_LE(self, 0.0);
    // With i = j pairs in the cross sum but not the within sums, the self
    // distance is -(1/N - 1/(N(N-1))) * 2 * sum_{i<j} |x_i - x_j| * ... computed directly:
    double pair = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) pair += std::abs(x.points(i, 0) - x.points(j, 0));
    EXPECT_NEAR(self, 2.0 * pair / 9.0 - 2.0 * pair / 6.0, 1e-15);
}

TEST(EnergyDistance, MatchesPopulationValueWithinMonteCarloError) {
    // In one dimension the population value is 2 int (F - G)^2 dx.
    const double m1 = 0.0, s1 = 1.0, m2 = 0.8, s2 = 1.4;
    const double population = 2.0 * oracle::midpoint([&](double x) {
        const double d = oracle::normal_cdf((x - m1) / s1) - oracle::normal_cdf((x - m2) / s2);
        return d * d;
    }, -20.0, 20.0, 200000);
    const int reps = 40;
    std::vector<double> est;
    for (int rep = 0; rep < reps; ++rep) {
        RngStream r(51, static_cast<std::uint64_t>(rep));
        est.push_back(energy_dist_sq_ensemble(normal_draws(400, m1, s1, r.derive("x")),
                                              normal_draws(400, m2, s2, r.derive("y"))));
    }
    double mean = 0.0, var = 0.0;
    for (double e : est) mean += e / reps;
    for (double e : est) var += (e - mean) * (e - mean) / (reps - 1);
    EXPECT_NEAR(mean, population, 4.0 * std::sqrt(var / reps));
}

// ===========================================================================
// Inequality chain and symmetry on random scalar pairs
// ===========================================================================

TEST(MetricProperties, InequalityChainOnRandomPairs) {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> um(-2.0, 2.0), uv(0.4, 2.0);
    int checked = 0;
    while (checked < 100) {
        const double mp = um(rng), vp = uv(rng), mq = um(rng), vq = uv(rng);
        if (2.0 * vq <= vp * 1.05) continue;
        ++checked;
        const auto p = gauss_grid(mp, vp, 30000, -25.0, 25.0);
        const auto q = gauss_grid(mq, vq, 30000, -25.0, 25.0);
        const double tv = tv_grid(p, q), h = hellinger_grid(p, q);
        const double kl = kl_gaussian(scalar(mp, vp), scalar(mq, vq));
        const double chi2 = chi2_gaussian(scalar(mp, vp), scalar(mq, vq));
        const double slack = -1e-8;
        EXPECT_GE(h - tv / std::sqrt(2.0), slack);
        EXPECT_GE(std::sqrt(tv) - h, slack);
        EXPECT_GE(0.5 * kl - h * h, slack);
        EXPECT_GE(kl - tv * tv, slack);
        EXPECT_GE(std::log(chi2 + 1.0) - kl, slack);
        EXPECT_GE(chi2 - std::log(chi2 + 1.0), slack);

        EXPECT_NEAR(tv, tv_grid(q, p), 1e-14);
        EXPECT_NEAR(h, hellinger_grid(q, p), 1e-14);
    }
}

TEST(MetricProperties, EnsembleDistancesAreSymmetric) {
    RngStream r(8);
    const auto x = normal_draws(50, 0.0, 1.0, r.derive("x"));
    const auto y = normal_draws(40, 1.0, 2.0, r.derive("y"));
    EXPECT_NEAR(energy_dist_sq_ensemble(x, y), energy_dist_sq_ensemble(y, x), 1e-14);
    EXPECT_NEAR(wasserstein1_empirical_1d(x, y), wasserstein1_empirical_1d(y, x), 1e-14);
}

TEST(MetricProperties, ResultJson) {
    EXPECT_EQ(result_json("tv", 0.5, {{"grid", "uniform"}}), R"({"meta":{"grid":"uniform"},"metric":"tv","value":0.5})");
}
