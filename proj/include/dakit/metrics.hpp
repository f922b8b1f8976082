#pragma once

#include "dakit/core.hpp"

#include <map>
#include <string>

namespace dakit::metrics {

// Density tabulated at the midpoints of a uniform 1-D grid.
struct GridDensity {
    Vector nodes;
    Vector values;

    double spacing() const;
    // Uniform spacing, nonnegative values, and spacing * sum(values) within 1e-6 of one.
    void validate() const;

    template <class F>
    static GridDensity tabulate(double lo, double hi, Eigen::Index cells, F&& pdf) {
        GridDensity g;
        g.nodes.resize(cells);
        g.values.resize(cells);
        const double h = (hi - lo) / static_cast<double>(cells);
        for (Eigen::Index i = 0; i < cells; ++i) {
            g.nodes(i) = lo + (static_cast<double>(i) + 0.5) * h;
            g.values(i) = pdf(g.nodes(i));
        }
        return g;
    }
    static GridDensity gaussian(double mean, double var, double lo, double hi, Eigen::Index cells);
};

struct SampleSet {
    Matrix points;  // N x d
};

double tv_grid(const GridDensity& p, const GridDensity& q);
double hellinger_grid(const GridDensity& p, const GridDensity& q);

double kl_gaussian(const Gaussian& p, const Gaussian& q);
// chi^2(p||q) = int p^2/q - 1; domain error unless 2 cov_q - cov_p is positive definite.
double chi2_gaussian(const Gaussian& p, const Gaussian& q);

// (int_0^1 |F_p^{-1} - F_q^{-1}|^pexp)^{1/pexp} by the midpoint rule on
// `alpha_nodes` levels, inverting piecewise-linear CDFs.
double wasserstein_p_quantile(const GridDensity& p, const GridDensity& q, double pexp, int alpha_nodes = 1024);

// W1 between two 1-D empirical measures; exact for any sample counts.
double wasserstein1_empirical_1d(const SampleSet& x, const SampleSet& y);

struct Kernel {
    enum class Kind { gaussian, linear, negdist };
    Kind kind = Kind::gaussian;
    double bandwidth = 1.0;

    static Kernel gaussian(double bandwidth) { return {Kind::gaussian, bandwidth}; }
    static Kernel linear() { return {Kind::linear, 0.0}; }
    static Kernel negdist() { return {Kind::negdist, 0.0}; }

    double operator()(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v) const;
};

// Within-sample sums over i != j scaled by 1/(N(N-1)), cross sum over all
// pairs scaled by 2/(N M). Can be negative.
double mmd_sq_ensemble(const SampleSet& x, const SampleSet& y, const Kernel& kernel);
double energy_dist_sq_ensemble(const SampleSet& x, const SampleSet& y);

// {"metric": ..., "value": ..., "meta": {...}} with keys in sorted order.
std::string result_json(const std::string& metric, double value, const std::map<std::string, std::string>& meta = {});

}  // namespace dakit::metrics
