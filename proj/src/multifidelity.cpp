#include "dakit/multifidelity.hpp"

#include "dakit/error.hpp"
#include "dakit/filters.hpp"
#include "dakit/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace dakit::multifidelity {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Above this many feasible allocations the automatic method stops enumerating.
constexpr std::uint64_t kEnumerationLimit = 1'000'000;

void check_positive_finite(double x, const std::string& what) {
    require(std::isfinite(x) && x > 0.0, ErrorKind::argument, what + " must be positive and finite");
}

// Solves the normal equations of a stacked information sum. `terms` are the
// (G, C, value) triples; the observation term, when present, enters the same way.
struct InformationSum {
    Matrix precision;
    Vector rhs;

    explicit InformationSum(Eigen::Index d) : precision(Matrix::Zero(d, d)), rhs(Vector::Zero(d)) {}

    void add(const Matrix& g, const Matrix& cov, const Vector& value, const std::string& what) {
        require(g.cols() == precision.rows(), ErrorKind::argument, what + ": projection has the wrong width");
        require(cov.rows() == g.rows() && cov.cols() == g.rows() && value.size() == g.rows(), ErrorKind::argument,
                what + ": covariance and value must match the projection rows");
        // C^{-1} [G, value] in one solve.
        Matrix rhs_block(g.rows(), g.cols() + 1);
        rhs_block << g, value;
        const Matrix solved = spd_solve(symmetrize(cov), rhs_block, what + ": covariance");
        precision.noalias() += g.transpose() * solved.leftCols(g.cols());
        rhs.noalias() += g.transpose() * solved.col(g.cols());
    }

    Gaussian solve(const std::string& what) const {
        const Matrix p = symmetrize(precision);
        Eigen::SelfAdjointEigenSolver<Matrix> eig(p);
        const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
        require(top > 0.0 && eig.eigenvalues().minCoeff() > 1e-12 * top, ErrorKind::rank,
                what + ": combined precision matrix is singular");
        const Vector inv_vals = eig.eigenvalues().cwiseInverse();
        const Matrix cov = eig.eigenvectors() * inv_vals.asDiagonal() * eig.eigenvectors().transpose();
        return Gaussian{cov * rhs, symmetrize(cov)};
    }
};

Eigen::Index state_width(const std::vector<ProjectedEstimate>& terms, const std::string& what) {
    require(!terms.empty(), ErrorKind::argument, what + ": no estimates");
    return terms.front().projection.cols();
}

Vector column_mean(const Matrix& m, Eigen::Index rows) { return m.topRows(rows).colwise().mean().transpose(); }

// Weights rho sigma_hi / sigma with zero for constant low-fidelity outputs.
Vector weights_of(const FidelityStats& s) {
    Vector w(s.models());
    for (Eigen::Index l = 0; l < s.models(); ++l)
        w(l) = s.sigma(l) > 0.0 ? s.rho(l) * s.sigma_hi / s.sigma(l) : 0.0;
    return w;
}

double variance_unchecked(const FidelityStats& s, const std::vector<Eigen::Index>& sizes, const Vector& w) {
    double v = s.sigma_hi * s.sigma_hi / double(sizes[0]);
    for (Eigen::Index l = 0; l < s.models(); ++l) {
        const double gap = 1.0 / double(sizes[l]) - 1.0 / double(sizes[l + 1]);
        v += gap * (w(l) * w(l) * s.sigma(l) * s.sigma(l) - 2.0 * w(l) * s.rho(l) * s.sigma_hi * s.sigma(l));
    }
    return v;
}

void check_sizes(const std::vector<Eigen::Index>& sizes, const std::string& what) {
    require(!sizes.empty(), ErrorKind::argument, what + ": no sample sizes");
    require(sizes[0] >= 1, ErrorKind::argument, what + ": sample sizes must be at least 1");
    for (std::size_t l = 1; l < sizes.size(); ++l)
        require(sizes[l] >= sizes[l - 1], ErrorKind::argument,
                what + ": sample sizes must be nondecreasing from the high-fidelity model");
}

// Runs `map` on rows [0, n) of `inputs` in parallel and stacks the outputs.
Matrix evaluate_rows(const VectorMap& map, const Matrix& inputs, Eigen::Index n, const std::string& what) {
    std::vector<Vector> out(static_cast<std::size_t>(n));
    parallel_for(out.size(), [&](std::size_t i) { out[i] = map(inputs.row(Eigen::Index(i)).transpose()); });
    const Eigen::Index q = out.empty() ? 0 : out.front().size();
    Matrix stacked(n, q);
    for (Eigen::Index i = 0; i < n; ++i) {
        require(out[std::size_t(i)].size() == q, ErrorKind::evaluation, what + ": model output size changed");
        stacked.row(i) = out[std::size_t(i)].transpose();
    }
    require(all_finite(stacked), ErrorKind::evaluation, what + ": model returned non-finite values");
    return stacked;
}

Matrix sample_covariance(const Matrix& rows) {
    const Matrix centered = rows.rowwise() - rows.colwise().mean();
    return symmetrize(centered.transpose() * centered / double(rows.rows() - 1));
}

}  // namespace

void FidelityModel::validate() const {
    require(static_cast<bool>(map), ErrorKind::argument, "fidelity model '" + name + "': map is empty");
    check_positive_finite(cost, "fidelity model '" + name + "': cost");
    if (projection) require(all_finite(*projection), ErrorKind::argument, "fidelity model: projection not finite");
}

void FidelityStats::validate() const {
    require(rho.size() == sigma.size(), ErrorKind::argument, "fidelity stats: rho and sigma differ in length");
    check_positive_finite(sigma_hi, "fidelity stats: sigma_hi");
    for (Eigen::Index l = 0; l < sigma.size(); ++l) {
        check_positive_finite(sigma(l), "fidelity stats: sigma");
        require(std::isfinite(rho(l)) && std::abs(rho(l)) <= 1.0, ErrorKind::argument,
                "fidelity stats: correlations must lie in [-1, 1]");
    }
}

void MfmcPlan::validate() const {
    check_sizes(sizes, "mfmc plan");
    require(weights.size() == models(), ErrorKind::argument, "mfmc plan: need one weight per low-fidelity model");
    require(all_finite(weights), ErrorKind::argument, "mfmc plan: weights must be finite");
}

Gaussian blue_combine(const std::vector<ProjectedEstimate>& estimates) {
    InformationSum sum(state_width(estimates, "blue_combine"));
    for (const ProjectedEstimate& e : estimates) sum.add(e.projection, e.cov, e.value, "blue_combine");
    return sum.solve("blue_combine");
}

MultiModelAnalysis mmkf_analysis(const std::vector<ProjectedEstimate>& forecasts, const Matrix& h,
                                 const Matrix& obs_noise, const Vector& y) {
    InformationSum sum(state_width(forecasts, "mmkf_analysis"));
    for (const ProjectedEstimate& f : forecasts) sum.add(f.projection, f.cov, f.value, "mmkf_analysis");
    sum.add(h, obs_noise, y, "mmkf_analysis observation");
    MultiModelAnalysis out{sum.solve("mmkf_analysis"), {}};
    for (const ProjectedEstimate& f : forecasts)
        out.per_model.push_back(Gaussian{f.projection * out.analysis.mean,
                                         symmetrize(f.projection * out.analysis.cov * f.projection.transpose())});
    return out;
}

Vector mfmc_weights(const FidelityStats& stats) {
    stats.validate();
    return weights_of(stats);
}

double mfmc_variance(const FidelityStats& stats, const std::vector<Eigen::Index>& sizes, const Vector& weights) {
    stats.validate();
    check_sizes(sizes, "mfmc_variance");
    require(Eigen::Index(sizes.size()) == stats.models() + 1 && weights.size() == stats.models(),
            ErrorKind::argument, "mfmc_variance: sizes, weights and stats disagree on the number of models");
    return variance_unchecked(stats, sizes, weights);
}

std::vector<FidelityStats> estimate_stats(const Matrix& hi, const std::vector<Matrix>& lows, Eigen::Index pairs) {
    require(pairs >= 2 && hi.rows() >= pairs, ErrorKind::argument, "estimate_stats: need at least two shared rows");
    const Eigen::Index q = hi.cols();
    const auto centered = [pairs](const Matrix& m) -> Matrix {
        return m.topRows(pairs).rowwise() - m.topRows(pairs).colwise().mean();
    };
    const Matrix hc = centered(hi);
    const double shrink = pairs < 10 ? double(pairs) / 10.0 : 1.0;
    std::vector<FidelityStats> out(static_cast<std::size_t>(q));
    for (Eigen::Index c = 0; c < q; ++c) {
        FidelityStats& s = out[std::size_t(c)];
        s.sigma_hi = std::sqrt(hc.col(c).squaredNorm() / double(pairs - 1));
        s.sigma.resize(Eigen::Index(lows.size()));
        s.rho.resize(Eigen::Index(lows.size()));
    }
    for (std::size_t l = 0; l < lows.size(); ++l) {
        require(lows[l].rows() >= pairs && lows[l].cols() == q, ErrorKind::argument,
                "estimate_stats: low-fidelity evaluations have the wrong shape");
        const Matrix lc = centered(lows[l]);
        for (Eigen::Index c = 0; c < q; ++c) {
            FidelityStats& s = out[std::size_t(c)];
            const double sl = std::sqrt(lc.col(c).squaredNorm() / double(pairs - 1));
            s.sigma(Eigen::Index(l)) = sl;
            double rho = 0.0;
            if (sl > 0.0 && s.sigma_hi > 0.0) {
                rho = hc.col(c).dot(lc.col(c)) / double(pairs - 1) / (sl * s.sigma_hi);
                rho = std::clamp(rho, -1.0, 1.0) * shrink;
            }
            s.rho(Eigen::Index(l)) = rho;
        }
    }
    return out;
}

MfmcEstimate mfmc_combine(const Matrix& hi, const std::vector<Matrix>& lows, const Matrix& weights) {
    const Eigen::Index q = hi.cols();
    const Eigen::Index models = Eigen::Index(lows.size());
    require(hi.rows() >= 1, ErrorKind::argument, "mfmc_combine: no high-fidelity evaluations");
    require(weights.rows() == models && weights.cols() == q, ErrorKind::argument,
            "mfmc_combine: weights must be (low-fidelity models) x (outputs)");
    std::vector<Eigen::Index> sizes{hi.rows()};
    for (const Matrix& low : lows) {
        require(low.cols() == q, ErrorKind::argument, "mfmc_combine: outputs differ in size across models");
        sizes.push_back(low.rows());
    }
    check_sizes(sizes, "mfmc_combine");

    MfmcEstimate out;
    out.mean = column_mean(hi, hi.rows());
    for (Eigen::Index l = 0; l < models; ++l) {
        const Matrix& low = lows[std::size_t(l)];
        const Vector correction = column_mean(low, low.rows()) - column_mean(low, sizes[std::size_t(l)]);
        out.mean += weights.row(l).transpose().cwiseProduct(correction);
    }
    if (hi.rows() < 2) {
        out.variance = Vector::Constant(q, kInf);
        return out;
    }
    out.stats = estimate_stats(hi, lows, hi.rows());
    out.variance.resize(q);
    for (Eigen::Index c = 0; c < q; ++c)
        out.variance(c) = variance_unchecked(out.stats[std::size_t(c)], sizes, weights.col(c));
    return out;
}

MfmcEstimate mfmc_mean(const VectorMap& hi, const std::vector<FidelityModel>& lows, const MfmcPlan& plan,
                       const Matrix& inputs) {
    plan.validate();
    require(static_cast<bool>(hi), ErrorKind::argument, "mfmc_mean: high-fidelity map is empty");
    require(plan.models() == Eigen::Index(lows.size()), ErrorKind::argument,
            "mfmc_mean: plan and model list disagree on the number of low-fidelity models");
    for (const FidelityModel& m : lows) m.validate();
    require(inputs.rows() >= plan.sizes.back(), ErrorKind::argument,
            "mfmc_mean: fewer input draws than the largest sample size");

    const Matrix hi_out = evaluate_rows(hi, inputs, plan.sizes[0], "mfmc_mean");
    std::vector<Matrix> low_out;
    for (std::size_t l = 0; l < lows.size(); ++l)
        low_out.push_back(evaluate_rows(lows[l].map, inputs, plan.sizes[l + 1], "mfmc_mean"));
    Matrix w(plan.models(), hi_out.cols());
    for (Eigen::Index l = 0; l < plan.models(); ++l) w.row(l).setConstant(plan.weights(l));
    return mfmc_combine(hi_out, low_out, w);
}

namespace {

struct AllocationProblem {
    std::vector<double> costs;
    FidelityStats stats;
    Vector weights;
    double budget = 0.0;

    std::size_t levels() const { return costs.size(); }
    double cost(const std::vector<Eigen::Index>& n) const {
        double c = 0.0;
        for (std::size_t l = 0; l < n.size(); ++l) c += costs[l] * double(n[l]);
        return c;
    }
    double variance(const std::vector<Eigen::Index>& n) const { return variance_unchecked(stats, n, weights); }
    // Cost of raising every level from l on by one sample.
    double tail_cost(std::size_t l) const { return std::accumulate(costs.begin() + long(l), costs.end(), 0.0); }
};

// Lower variance wins; near ties go to the cheaper allocation.
bool better(const AllocationProblem& p, const std::vector<Eigen::Index>& a, double va,
            const std::vector<Eigen::Index>& b, double vb) {
    const double tol = 1e-14 * std::max(std::abs(va), std::abs(vb));
    if (va < vb - tol) return true;
    if (va > vb + tol) return false;
    return p.cost(a) < p.cost(b);
}

// Number of feasible allocations, stopping once it passes `limit`.
std::uint64_t count_lattice(const AllocationProblem& p, std::size_t level, Eigen::Index lower, double remaining,
                            std::uint64_t limit) {
    const double tail = p.tail_cost(level);
    const double top = std::floor(remaining / tail + 1e-12);
    if (top < double(lower)) return 0;
    if (level + 1 == p.levels()) return std::uint64_t(top) - std::uint64_t(lower) + 1;
    std::uint64_t total = 0;
    for (Eigen::Index n = lower; double(n) <= top && total <= limit; ++n)
        total += count_lattice(p, level + 1, n, remaining - p.costs[level] * double(n), limit - total);
    return total;
}

void enumerate_lattice(const AllocationProblem& p, std::size_t level, Eigen::Index lower, double remaining,
                       std::vector<Eigen::Index>& current, std::vector<Eigen::Index>& best, double& best_var) {
    const double top = std::floor(remaining / p.tail_cost(level) + 1e-12);
    for (Eigen::Index n = lower; double(n) <= top; ++n) {
        current[level] = n;
        if (level + 1 == p.levels()) {
            const double v = p.variance(current);
            if (best.empty() || better(p, current, v, best, best_var)) {
                best = current;
                best_var = v;
            }
        } else {
            enumerate_lattice(p, level + 1, n, remaining - p.costs[level] * double(n), current, best, best_var);
        }
    }
}

std::vector<Eigen::Index> enumerate_best(const AllocationProblem& p) {
    std::vector<Eigen::Index> current(p.levels()), best;
    double best_var = kInf;
    enumerate_lattice(p, 0, 1, p.budget, current, best, best_var);
    return best;
}

// Continuous optimum of the allocation for ordered correlations, then
// rounded down and repaired into a feasible integer point.
std::vector<Eigen::Index> relaxed_best(const AllocationProblem& p) {
    const std::size_t levels = p.levels();
    const Vector& rho = p.stats.rho;
    // Ratios r_l = N_l / N_0 of the closed-form optimum.
    std::vector<double> ratio(levels, 1.0);
    const double top_gap = std::max(1.0 - rho(0) * rho(0), 1e-12);
    for (std::size_t l = 1; l < levels; ++l) {
        const double next = l < levels - 1 ? rho(Eigen::Index(l)) * rho(Eigen::Index(l)) : 0.0;
        const double gap = rho(Eigen::Index(l - 1)) * rho(Eigen::Index(l - 1)) - next;
        const double r = gap > 0.0 ? std::sqrt(p.costs[0] * gap / (p.costs[l] * top_gap)) : 0.0;
        ratio[l] = std::max(r, ratio[l - 1]);
    }
    double per_unit = 0.0;
    for (std::size_t l = 0; l < levels; ++l) per_unit += p.costs[l] * ratio[l];
    double n0 = p.budget / per_unit;
    std::vector<double> cont(levels);
    if (n0 >= 1.0) {
        for (std::size_t l = 0; l < levels; ++l) cont[l] = n0 * ratio[l];
    } else {
        // Pin the high-fidelity size at one and share the rest in proportion.
        double rest = 0.0;
        for (std::size_t l = 1; l < levels; ++l) rest += p.costs[l] * ratio[l];
        const double t = rest > 0.0 ? (p.budget - p.costs[0]) / rest : 0.0;
        cont[0] = 1.0;
        for (std::size_t l = 1; l < levels; ++l) cont[l] = t * ratio[l];
    }
    std::vector<Eigen::Index> n(levels);
    for (std::size_t l = 0; l < levels; ++l) {
        n[l] = std::max<Eigen::Index>(1, Eigen::Index(std::floor(cont[l])));
        if (l > 0) n[l] = std::max(n[l], n[l - 1]);
    }

    const auto valid_down = [&](std::size_t l) {
        return n[l] - 1 >= (l == 0 ? 1 : n[l - 1]);
    };
    const auto valid_up = [&](std::size_t l) { return l + 1 == levels || n[l] + 1 <= n[l + 1]; };

    // Repair: remove samples where that costs the least variance per unit saved.
    while (p.cost(n) > p.budget + 1e-9 * p.budget) {
        const double v = p.variance(n);
        std::size_t pick = levels;
        double best_rate = kInf;
        for (std::size_t l = 0; l < levels; ++l) {
            if (!valid_down(l)) continue;
            --n[l];
            const double rate = (p.variance(n) - v) / p.costs[l];
            ++n[l];
            if (rate < best_rate) {
                best_rate = rate;
                pick = l;
            }
        }
        require(pick < levels, ErrorKind::domain, "mosap_allocate: cannot repair the rounded allocation");
        --n[pick];
    }
    // Spend what is left on the sample with the largest variance drop per cost.
    for (;;) {
        const double v = p.variance(n);
        const double left = p.budget - p.cost(n);
        std::size_t pick = levels;
        double best_rate = 0.0;
        for (std::size_t l = 0; l < levels; ++l) {
            if (!valid_up(l) || p.costs[l] > left + 1e-9 * p.budget) continue;
            ++n[l];
            const double rate = (v - p.variance(n)) / p.costs[l];
            --n[l];
            if (rate > best_rate) {
                best_rate = rate;
                pick = l;
            }
        }
        if (pick == levels) break;
        ++n[pick];
    }
    return n;
}

}  // namespace

MfmcPlan mosap_allocate(const std::vector<double>& costs, const FidelityStats& stats, double budget,
                        AllocationMethod method) {
    stats.validate();
    require(Eigen::Index(costs.size()) == stats.models() + 1, ErrorKind::argument,
            "mosap_allocate: need one cost per model, high fidelity first");
    for (double c : costs) check_positive_finite(c, "mosap_allocate: cost");
    require(std::isfinite(budget), ErrorKind::argument, "mosap_allocate: budget must be finite");
    const double minimal = std::accumulate(costs.begin(), costs.end(), 0.0);
    require(budget >= minimal * (1.0 - 1e-12), ErrorKind::domain,
            "mosap_allocate: budget cannot pay for one evaluation of every model");

    AllocationProblem p{costs, stats, weights_of(stats), budget};
    MfmcPlan plan;
    plan.weights = p.weights;
    if (method == AllocationMethod::automatic)
        method = count_lattice(p, 0, 1, budget, kEnumerationLimit) <= kEnumerationLimit ? AllocationMethod::enumerate
                                                                                           : AllocationMethod::relax;
    if (costs.size() == 1) {
        plan.sizes = {Eigen::Index(std::floor(budget / costs[0] + 1e-12))};
        plan.enumerated = true;
    } else if (method == AllocationMethod::enumerate) {
        plan.sizes = enumerate_best(p);
        plan.enumerated = true;
    } else {
        plan.sizes = relaxed_best(p);
    }
    plan.variance = p.variance(plan.sizes);
    return plan;
}

MfEnkfStep mf_enkf_step(const Gaussian& state, const std::vector<FidelityModel>& models,
                        const std::vector<Eigen::Index>& sizes, const Matrix& h, const Matrix& obs_noise,
                        const Vector& y, const MfEnkfConfig& cfg, std::uint64_t step) {
    state.validate("mf_enkf_step state");
    require(!models.empty(), ErrorKind::argument, "mf_enkf_step: no models");
    require(sizes.size() == models.size(), ErrorKind::argument, "mf_enkf_step: need one sample size per model");
    check_sizes(sizes, "mf_enkf_step");
    require(sizes[0] >= 2, ErrorKind::argument, "mf_enkf_step: the high-fidelity ensemble needs two members");
    for (const FidelityModel& m : models) m.validate();
    const Eigen::Index d = state.dim();
    require(h.cols() == d && h.rows() == y.size() && obs_noise.rows() == y.size() && obs_noise.cols() == y.size(),
            ErrorKind::argument, "mf_enkf_step: observation shapes do not match");
    if (cfg.model_noise)
        require(cfg.model_noise->rows() == d && cfg.model_noise->cols() == d, ErrorKind::argument,
                "mf_enkf_step: model noise must be d x d");

    const Ensemble draws = gaussian_sample(state, sizes.back(), cfg.rng.derive("mfenkf", step));
    std::vector<Matrix> outputs;
    for (std::size_t l = 0; l < models.size(); ++l) {
        outputs.push_back(evaluate_rows(models[l].map, draws.members, sizes[l], "mf_enkf_step"));
        require(outputs.back().cols() == d, ErrorKind::evaluation, "mf_enkf_step: models must return a state");
    }
    const std::vector<Matrix> lows(outputs.begin() + 1, outputs.end());

    MfEnkfStep out;
    const std::vector<FidelityStats> stats = estimate_stats(outputs[0], lows, sizes[0]);
    out.weights.resize(Eigen::Index(lows.size()), d);
    for (Eigen::Index c = 0; c < d; ++c) out.weights.col(c) = weights_of(stats[std::size_t(c)]);
    const MfmcEstimate mean = mfmc_combine(outputs[0], lows, out.weights);
    out.mean_variance = mean.variance;

    Matrix cov;
    if (cfg.covariance == CovarianceSource::combined) {
        std::vector<CovarianceEstimate> parts;
        for (const Matrix& o : outputs) {
            const Matrix c = sample_covariance(o);
            // Frobenius risk of a Gaussian sample covariance.
            const double risk = (c.squaredNorm() + c.trace() * c.trace()) / double(o.rows() - 1);
            parts.push_back({c, std::max(risk, std::numeric_limits<double>::min())});
        }
        cov = mf_cov_combine(parts).combined;
    } else {
        cov = sample_covariance(outputs[0]);
    }
    if (cfg.model_noise) cov += *cfg.model_noise;
    cov.diagonal() += mean.variance;
    out.forecast = Gaussian{mean.mean, symmetrize(cov)};
    out.analysis = filters::kalman_analysis(out.forecast, h, obs_noise, y).analysis;
    return out;
}

CovarianceCombination mf_cov_combine(const std::vector<CovarianceEstimate>& estimates) {
    require(!estimates.empty(), ErrorKind::argument, "mf_cov_combine: no estimates");
    const Eigen::Index d = estimates.front().cov.rows();
    double inv_sum = 0.0;
    for (const CovarianceEstimate& e : estimates) {
        require(e.cov.rows() == d && e.cov.cols() == d, ErrorKind::argument,
                "mf_cov_combine: covariances must share one square shape");
        check_positive_finite(e.expected_error, "mf_cov_combine: expected error");
        inv_sum += 1.0 / e.expected_error;
    }
    CovarianceCombination out;
    out.weights.resize(Eigen::Index(estimates.size()));
    out.combined = Matrix::Zero(d, d);
    for (std::size_t l = 0; l < estimates.size(); ++l) {
        out.weights(Eigen::Index(l)) = (1.0 / estimates[l].expected_error) / inv_sum;
        out.combined += out.weights(Eigen::Index(l)) * estimates[l].cov;
    }
    out.total_variance = 1.0 / inv_sum;
    return out;
}

}  // namespace dakit::multifidelity
