#ifndef PCEM_MSTEP_HPP
#define PCEM_MSTEP_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "pcem/error.hpp"
#include "pcem/panel.hpp"
#include "pcem/stepfn.hpp"

namespace pcem {

// Interval (t_prev, t] carrying the count factor of the complete-data
// likelihood: the observed count, or an imputed expected increment.
// Excluded intervals keep their place in the structure (they still define
// jump points) but contribute nothing to the objective.
struct WeightedInterval
{
    double t_prev = 0.0;
    double t = 0.0;
    double weight = 0.0;
    bool included = true;

    bool operator==(const WeightedInterval&) const = default;
};

struct WeightedIntervals
{
    std::vector<std::vector<WeightedInterval>> subjects;

    std::size_t interval_count() const
    {
        std::size_t k = 0;
        for (const auto& s : subjects) k += s.size();
        return k;
    }
    bool operator==(const WeightedIntervals&) const = default;
};

// Weights from the observed counts; missing intervals are excluded.
inline WeightedIntervals observed_weights(const PanelDataset& dataset)
{
    WeightedIntervals out;
    out.subjects.reserve(dataset.size());
    for (const auto& tr : dataset.trajectories()) {
        auto& s = out.subjects.emplace_back();
        s.reserve(tr.size());
        for (const auto& iv : tr.intervals())
            s.push_back({iv.t_prev, iv.t, iv.count.value_or(0.0), !iv.missing()});
    }
    return out;
}

// Weights with every missing count replaced by fill(subject, interval).
template <class Fill>
WeightedIntervals filled_weights(const PanelDataset& dataset, Fill&& fill)
{
    WeightedIntervals out;
    out.subjects.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& tr = dataset[i];
        auto& s = out.subjects.emplace_back();
        s.reserve(tr.size());
        for (std::size_t j = 0; j < tr.size(); ++j) {
            const auto& iv = tr[j];
            const double w = iv.count ? *iv.count : fill(i, j);
            s.push_back({iv.t_prev, iv.t, w, true});
        }
    }
    return out;
}

// Sorted distinct observation times pooled over all intervals, with the
// number of included intervals covering each point.
class JumpGrid
{
public:
    static JumpGrid build(const WeightedIntervals& wi)
    {
        JumpGrid g;
        for (const auto& s : wi.subjects)
            for (const auto& iv : s) g.times_.push_back(iv.t);
        std::sort(g.times_.begin(), g.times_.end());
        g.times_.erase(std::unique(g.times_.begin(), g.times_.end()), g.times_.end());
        std::vector<double> diff(g.times_.size() + 1, 0.0);
        for (const auto& s : wi.subjects)
            for (const auto& iv : s) {
                if (!iv.included) continue;
                auto [lo, hi] = g.cover(iv.t_prev, iv.t);
                diff[lo] += 1.0;
                diff[hi + 1] -= 1.0;
            }
        g.coverage_.resize(g.times_.size());
        double run = 0.0;
        for (std::size_t k = 0; k < g.times_.size(); ++k) g.coverage_[k] = (run += diff[k]);
        return g;
    }

    const std::vector<double>& times() const { return times_; }
    const std::vector<double>& coverage() const { return coverage_; }
    std::size_t size() const { return times_.size(); }

    // Inclusive index range of grid points lying in (t_prev, t]; t must be a grid point.
    std::pair<std::size_t, std::size_t> cover(double t_prev, double t) const
    {
        const auto lo = static_cast<std::size_t>(
            std::upper_bound(times_.begin(), times_.end(), t_prev) - times_.begin());
        auto it = std::lower_bound(times_.begin(), times_.end(), t);
        if (it == times_.end() || *it != t)
            throw std::invalid_argument("JumpGrid::cover: interval end is not a grid point");
        const auto hi = static_cast<std::size_t>(it - times_.begin());
        return {lo, hi};
    }

private:
    std::vector<double> times_;
    std::vector<double> coverage_;
};

struct MleOptions
{
    double tol = 1e-8;              // max jump change between iterations
    std::size_t max_iter = 10000;
    double kkt_tol = 1e-9;          // projected-gradient residual at which the fit is accepted
    std::size_t warmup = 20;        // multiplicative iterations before Newton polishing
    std::optional<double> cap;      // U_all; cumulative values are clipped at it
    std::optional<StepFunction> start;  // warm start; its increments on the grid replace the uniform start
};

struct MleFit
{
    StepFunction fn;
    std::size_t iterations = 0;
    bool converged = false;
    double kkt_residual = 0.0;
    std::vector<double> objective_trace;
    std::string status;
};

struct PseudoFit
{
    StepFunction fn;
    bool degenerate = false;  // every cumulative count was zero
};

namespace detail {

// Included intervals flattened onto the jump grid.
struct Design
{
    JumpGrid grid;
    std::vector<std::size_t> lo, hi;
    std::vector<double> w;

    std::size_t grid_size() const { return grid.size(); }
    std::size_t n_intervals() const { return w.size(); }
};

inline Design make_design(const WeightedIntervals& wi)
{
    Design d;
    d.grid = JumpGrid::build(wi);
    for (const auto& s : wi.subjects)
        for (const auto& iv : s) {
            if (!std::isfinite(iv.weight) || iv.weight < 0.0)
                throw std::invalid_argument("weights must be finite and nonnegative");
            if (!(iv.t_prev < iv.t)) throw std::invalid_argument("interval with t_prev >= t");
            if (!iv.included) continue;
            auto [lo, hi] = d.grid.cover(iv.t_prev, iv.t);
            d.lo.push_back(lo);
            d.hi.push_back(hi);
            d.w.push_back(iv.weight);
        }
    return d;
}

inline double loglik_term(double w, double D)
{
    if (w == 0.0) return -D;  // 0 log 0 := 0
    if (!(D > 0.0)) return -std::numeric_limits<double>::infinity();
    return w * std::log(D) - D;
}

// Scratch buffers for objective/gradient evaluation at a jump vector.
// Range sums by a segment tree. For nonnegative entries every partial sum is
// a sum of nonnegative terms, so a short range keeps full relative accuracy
// even when the total is many orders of magnitude larger.
class RangeSum
{
public:
    void assign(std::span<const double> values)
    {
        size_ = 1;
        while (size_ < values.size()) size_ <<= 1;
        tree_.assign(2 * size_, 0.0);
        std::copy(values.begin(), values.end(), tree_.begin() + static_cast<std::ptrdiff_t>(size_));
        for (std::size_t i = size_ - 1; i >= 1; --i) tree_[i] = tree_[2 * i] + tree_[2 * i + 1];
    }

    // Sum over the inclusive index range [lo, hi].
    double sum(std::size_t lo, std::size_t hi) const
    {
        double left = 0.0, right = 0.0;
        for (std::size_t l = lo + size_, r = hi + size_ + 1; l < r; l >>= 1, r >>= 1) {
            if (l & 1) left += tree_[l++];
            if (r & 1) right += tree_[--r];
        }
        return left + right;
    }

private:
    std::size_t size_ = 1;
    std::vector<double> tree_;
};

// Scratch buffers for objective/gradient evaluation at a jump vector.
class MleWorkspace
{
public:
    explicit MleWorkspace(const Design& d)
        : d_(d), D_(d.n_intervals()), s_(d.grid_size()), grad_(d.grid_size()), curv_(d.grid_size()),
          diff_(d.grid_size() + 1), cdiff_(d.grid_size() + 1), step_(d.grid_size())
    {
    }

    double objective(std::span<const double> lambda)
    {
        sums_.assign(lambda);
        for (std::size_t k = 0; k < D_.size(); ++k) D_[k] = sums_.sum(d_.lo[k], d_.hi[k]);
        double f = 0.0;
        for (std::size_t k = 0; k < D_.size(); ++k) f += loglik_term(d_.w[k], D_[k]);
        return f;
    }

    // Gradient and Hessian diagonal (negated) at the point of the last objective() call.
    void gradient()
    {
        std::fill(diff_.begin(), diff_.end(), 0.0);
        std::fill(cdiff_.begin(), cdiff_.end(), 0.0);
        for (std::size_t k = 0; k < D_.size(); ++k) {
            if (d_.w[k] == 0.0) continue;
            const double r = d_.w[k] / D_[k];
            diff_[d_.lo[k]] += r;
            diff_[d_.hi[k] + 1] -= r;
            cdiff_[d_.lo[k]] += r / D_[k];
            cdiff_[d_.hi[k] + 1] -= r / D_[k];
        }
        double run = 0.0, crun = 0.0;
        const auto& cov = d_.grid.coverage();
        for (std::size_t g = 0; g < s_.size(); ++g) {
            run += diff_[g];
            crun += cdiff_[g];
            s_[g] = run;
            grad_[g] = run - cov[g];
            curv_[g] = std::max(crun, 0.0);
        }
    }

    // Objective change from the last evaluated point to `next`, computed from
    // the step itself so that it stays accurate when the change is tiny.
    double change_to(std::span<const double> current, std::span<const double> next)
    {
        const auto& cov = d_.grid.coverage();
        double delta = 0.0;
        for (std::size_t g = 0; g < next.size(); ++g) {
            step_[g] = next[g] - current[g];
            delta -= cov[g] * step_[g];
        }
        next_sums_.assign(next);
        step_sums_.assign(step_);
        for (std::size_t k = 0; k < D_.size(); ++k) {
            if (d_.w[k] == 0.0) continue;
            const double Dn = next_sums_.sum(d_.lo[k], d_.hi[k]);
            if (!(Dn > 0.0)) return -std::numeric_limits<double>::infinity();
            const double dD = step_sums_.sum(d_.lo[k], d_.hi[k]);
            const double ratio = std::abs(dD) < 0.5 * D_[k] ? std::log1p(dD / D_[k]) : std::log(Dn / D_[k]);
            delta += d_.w[k] * ratio;
        }
        return delta;
    }

    const std::vector<double>& increments() const { return D_; }
    const std::vector<double>& ratio_sums() const { return s_; }
    const std::vector<double>& grad() const { return grad_; }
    const std::vector<double>& curvature() const { return curv_; }

private:
    const Design& d_;
    std::vector<double> D_, s_, grad_, curv_, diff_, cdiff_, step_;
    RangeSum sums_, next_sums_, step_sums_;
};

inline double projected_residual(std::span<const double> lambda, std::span<const double> grad,
                                 std::span<const double> coverage)
{
    double r = 0.0;
    for (std::size_t g = 0; g < lambda.size(); ++g) {
        if (coverage[g] == 0.0) continue;
        r = std::max(r, lambda[g] > 0.0 ? std::abs(grad[g]) : std::max(grad[g], 0.0));
    }
    return r;
}

// Solves (H + P) step = rhs over the jumps marked in `vars`, with H the
// negated Hessian of the objective restricted to those jumps and P a
// diagonal penalty in jump space (weights `path`). In cumulative-value space
// both terms are weighted graph Laplacians, so the system is sparse.
// Returns false if the factorization failed.
inline bool cumulative_solve(const Design& d, const std::vector<double>& D, const std::vector<char>& vars,
                             const std::vector<double>& path, const std::vector<double>& rhs,
                             std::vector<double>& step)
{
    const std::size_t m = d.grid_size();
    std::vector<std::size_t> block(m);
    std::vector<std::size_t> points;
    for (std::size_t g = 0; g < m; ++g) {
        if (vars[g]) points.push_back(g);
        block[g] = points.size();
    }
    const std::size_t F = points.size();
    for (std::size_t g = 0; g < m; ++g)
        if (vars[g]) step[g] = 0.0;
    if (F == 0) return true;

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(3 * d.n_intervals() + 3 * F);
    std::vector<double> diag(F, 0.0);
    for (std::size_t k = 0; k < d.n_intervals(); ++k) {
        if (d.w[k] == 0.0) continue;
        const std::size_t left = d.lo[k] == 0 ? 0 : block[d.lo[k] - 1];
        const std::size_t right = block[d.hi[k]];
        if (left == right) continue;
        const double c = d.w[k] / (D[k] * D[k]);
        diag[right - 1] += c;
        if (left > 0) {
            diag[left - 1] += c;
            trips.emplace_back(static_cast<int>(left - 1), static_cast<int>(right - 1), -c);
            trips.emplace_back(static_cast<int>(right - 1), static_cast<int>(left - 1), -c);
        }
    }
    for (std::size_t b = 0; b < F; ++b) {
        const double rho = path[points[b]];
        diag[b] += rho;
        if (b > 0) {
            diag[b - 1] += rho;
            trips.emplace_back(static_cast<int>(b - 1), static_cast<int>(b), -rho);
            trips.emplace_back(static_cast<int>(b), static_cast<int>(b - 1), -rho);
        }
    }
    for (std::size_t b = 0; b < F; ++b) trips.emplace_back(static_cast<int>(b), static_cast<int>(b), diag[b]);
    Eigen::SparseMatrix<double> L(static_cast<int>(F), static_cast<int>(F));
    L.setFromTriplets(trips.begin(), trips.end());

    Eigen::VectorXd r(static_cast<int>(F));
    for (std::size_t b = 0; b < F; ++b) {
        const double next = b + 1 < F ? rhs[points[b + 1]] : 0.0;
        r[static_cast<int>(b)] = rhs[points[b]] - next;
    }
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
    solver.compute(L);
    if (solver.info() != Eigen::Success) return false;
    Eigen::VectorXd y = solver.solve(r);
    if (solver.info() != Eigen::Success || !y.allFinite()) return false;

    double prev = 0.0;
    for (std::size_t b = 0; b < F; ++b) {
        step[points[b]] = y[static_cast<int>(b)] - prev;
        prev = y[static_cast<int>(b)];
    }
    return true;
}

// Same system as cumulative_solve, solved inexactly in jump space by
// Jacobi-preconditioned conjugate gradients. Every iterate is an ascent
// direction, so a truncated solve is still usable.
inline void jump_space_cg(const Design& d, const std::vector<double>& D, const std::vector<char>& vars,
                          const std::vector<double>& path, const std::vector<double>& curvature,
                          const std::vector<double>& rhs, std::vector<double>& step, std::size_t max_iter,
                          double rel_tol)
{
    const std::size_t m = d.grid_size();
    std::vector<double> coef(d.n_intervals(), 0.0);
    for (std::size_t k = 0; k < d.n_intervals(); ++k)
        if (d.w[k] > 0.0) coef[k] = d.w[k] / (D[k] * D[k]);
    std::vector<double> prefix(m + 1), diff(m + 1);
    auto apply = [&](const std::vector<double>& v, std::vector<double>& out) {
        prefix[0] = 0.0;
        for (std::size_t g = 0; g < m; ++g) prefix[g + 1] = prefix[g] + (vars[g] ? v[g] : 0.0);
        std::fill(diff.begin(), diff.end(), 0.0);
        for (std::size_t k = 0; k < coef.size(); ++k) {
            if (coef[k] == 0.0) continue;
            const double t = coef[k] * (prefix[d.hi[k] + 1] - prefix[d.lo[k]]);
            diff[d.lo[k]] += t;
            diff[d.hi[k] + 1] -= t;
        }
        double run = 0.0;
        for (std::size_t g = 0; g < m; ++g) {
            run += diff[g];
            out[g] = vars[g] ? run + path[g] * v[g] : 0.0;
        }
    };
    std::vector<double> r(m, 0.0), zv(m, 0.0), p(m, 0.0), q(m, 0.0), inv(m, 0.0);
    double rz = 0.0, bnorm = 0.0;
    for (std::size_t g = 0; g < m; ++g) {
        step[g] = 0.0;
        if (!vars[g]) continue;
        const double dg = path[g] + curvature[g];
        inv[g] = dg > 0.0 ? 1.0 / dg : 0.0;
        r[g] = rhs[g];
        zv[g] = inv[g] * r[g];
        p[g] = zv[g];
        rz += r[g] * zv[g];
        bnorm += rhs[g] * rhs[g];
    }
    const double stop = rel_tol * rel_tol * bnorm;
    for (std::size_t it = 0; it < max_iter && rz > 0.0; ++it) {
        apply(p, q);
        double pq = 0.0;
        for (std::size_t g = 0; g < m; ++g) pq += p[g] * q[g];
        if (!(pq > 0.0)) break;
        const double a = rz / pq;
        double rr = 0.0, rz_next = 0.0;
        for (std::size_t g = 0; g < m; ++g) {
            if (!vars[g]) continue;
            step[g] += a * p[g];
            r[g] -= a * q[g];
            zv[g] = inv[g] * r[g];
            rr += r[g] * r[g];
            rz_next += r[g] * zv[g];
        }
        if (rr <= stop) break;
        const double beta = rz_next / rz;
        rz = rz_next;
        for (std::size_t g = 0; g < m; ++g) p[g] = vars[g] ? zv[g] + beta * p[g] : 0.0;
    }
}

// Damped Newton direction for the free jumps. Damping penalizes the
// jump-space step, scaled by each jump's own curvature, which keeps the
// system definite along flat directions.
inline bool newton_direction(const Design& d, const std::vector<double>& D, const std::vector<double>& grad,
                             const std::vector<double>& curvature, const std::vector<char>& is_free, double damping,
                             std::vector<double>& dir)
{
    const std::size_t m = d.grid_size();
    std::fill(dir.begin(), dir.end(), 0.0);
    std::vector<double> pos;
    for (std::size_t g = 0; g < m; ++g)
        if (is_free[g] && curvature[g] > 0.0) pos.push_back(curvature[g]);
    double floor = 1.0;
    if (!pos.empty()) {
        std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(pos.size() / 2), pos.end());
        floor = 1e-6 * pos[pos.size() / 2];
    }
    std::vector<double> path(m, 0.0);
    for (std::size_t g = 0; g < m; ++g)
        if (is_free[g]) path[g] = damping * std::max(curvature[g], floor);
    return cumulative_solve(d, D, is_free, path, grad, dir);
}

// Primal-dual interior-point iterations on the jumps in `active`, all of
// which must be positive on entry. The barrier parameter is reduced once
// the barrier subproblem is solved to within a multiple of it. Jumps whose
// barrier curvature dwarfs the likelihood curvature are stepped on the
// diagonal alone, which keeps the cumulative-space factorization accurate.
// Appends the objective after each accepted step to `objectives` and keeps
// the iterate with the highest objective in `best`.
inline void interior_point(const Design& d, MleWorkspace& ws, std::vector<double> lambda,
                           const std::vector<char>& active, double scale, double target, std::size_t max_iter,
                           std::vector<double>& objectives, std::vector<double>& best, double& best_f)
{
    const std::size_t m = d.grid_size();
    double mu = 0.1;
    std::vector<double> z(m, 0.0), dl(m, 0.0), dz(m, 0.0), path(m, 0.0), rhs(m, 0.0), next(m, 0.0);
    std::vector<char> coupled(m, 0);
    ws.objective(lambda);
    ws.gradient();
    for (std::size_t g = 0; g < m; ++g)
        if (active[g]) z[g] = mu * scale / lambda[g];

    auto error = [&](double target_mu) {
        const auto& grad = ws.grad();
        double e = 0.0;
        for (std::size_t g = 0; g < m; ++g) {
            if (!active[g]) continue;
            e = std::max(e, std::abs(grad[g] + z[g]));
            e = std::max(e, std::abs(lambda[g] * z[g] - target_mu * scale) / scale);
        }
        return e;
    };

    for (std::size_t it = 0; it < max_iter; ++it) {
        while (mu > target && error(mu) <= 10.0 * mu) mu = std::max(target, std::min(0.2 * mu, std::pow(mu, 1.5)));
        if (mu <= target && error(mu) <= 10.0 * mu) return;

        const auto& grad = ws.grad();
        const auto& curv = ws.curvature();
        const double barrier = mu * scale;
        for (std::size_t g = 0; g < m; ++g) {
            coupled[g] = 0;
            if (!active[g]) continue;
            path[g] = z[g] / lambda[g];
            rhs[g] = grad[g] + barrier / lambda[g];
            coupled[g] = path[g] <= 1e6 * std::max(curv[g], 1e-300);
        }
        std::size_t n_coupled = 0;
        for (char c : coupled) n_coupled += c;
        if (n_coupled > 2000) {
            jump_space_cg(d, ws.increments(), active, path, curv, rhs, dl, 500, 1e-8);
            for (std::size_t g = 0; g < m; ++g) coupled[g] = active[g];
        } else if (!cumulative_solve(d, ws.increments(), coupled, path, rhs, dl)) {
            return;
        }
        for (std::size_t g = 0; g < m; ++g) {
            if (!active[g]) {
                dl[g] = 0.0;
                continue;
            }
            if (!coupled[g]) dl[g] = rhs[g] / (path[g] + curv[g]);
            dz[g] = barrier / lambda[g] - z[g] - path[g] * dl[g];
        }

        const double tau = std::max(0.99, 1.0 - mu);
        double alpha_p = 1.0, alpha_d = 1.0, slope = 0.0;
        for (std::size_t g = 0; g < m; ++g) {
            if (!active[g]) continue;
            if (dl[g] < 0.0) alpha_p = std::min(alpha_p, -tau * lambda[g] / dl[g]);
            if (dz[g] < 0.0) alpha_d = std::min(alpha_d, -tau * z[g] / dz[g]);
            slope += rhs[g] * dl[g];
        }
        if (!(slope > 0.0)) return;

        bool accepted = false;
        double alpha = alpha_p;
        for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
            double gain_barrier = 0.0;
            for (std::size_t g = 0; g < m; ++g) {
                next[g] = active[g] ? lambda[g] + alpha * dl[g] : lambda[g];
                if (active[g]) gain_barrier += std::log1p(alpha * dl[g] / lambda[g]);
            }
            const double gain = ws.change_to(lambda, next) + barrier * gain_barrier;
            if (std::isfinite(gain) && gain >= 1e-4 * alpha * slope) {
                accepted = true;
                break;
            }
        }
        if (!accepted) return;
        lambda.swap(next);
        const double f = ws.objective(lambda);
        objectives.push_back(f);
        if (f > best_f) {
            best_f = f;
            best = lambda;
        }
        ws.gradient();
        for (std::size_t g = 0; g < m; ++g) {
            if (!active[g]) continue;
            const double zc = z[g] + alpha_d * dz[g];
            const double central = barrier / lambda[g];
            z[g] = std::clamp(zc, central / 1e10, central * 1e10);
        }
    }
}

// Runs of consecutive grid points that no positive-weight interval separates
// and that have equal coverage leave the objective dependent only on the run
// total. Spread that total evenly so the returned maximizer is canonical.
inline void canonicalize_flat_runs(const Design& d, std::vector<double>& lambda)
{
    const std::size_t m = d.grid_size();
    if (m < 2) return;
    std::vector<int> pos_end(m, 0), pos_start(m, 0);
    for (std::size_t k = 0; k < d.n_intervals(); ++k) {
        if (d.w[k] == 0.0) continue;
        pos_end[d.hi[k]] += 1;
        pos_start[d.lo[k]] += 1;
    }
    const auto& cov = d.grid.coverage();
    std::size_t start = 0;
    for (std::size_t g = 0; g + 1 <= m; ++g) {
        const bool joins_next = g + 1 < m && cov[g] > 0.0 && pos_end[g] == 0 &&
                                pos_start[g + 1] == 0 && cov[g] == cov[g + 1];
        if (joins_next) continue;
        if (g > start) {
            double total = 0.0;
            for (std::size_t k = start; k <= g; ++k) total += lambda[k];
            const double each = total / static_cast<double>(g - start + 1);
            for (std::size_t k = start; k <= g; ++k) lambda[k] = each;
        }
        start = g + 1;
    }
}

inline StepFunction finish_step_function(const std::vector<double>& times,
                                         const std::vector<double>& jumps,
                                         std::optional<double> cap)
{
    std::vector<double> cum(jumps.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < jumps.size(); ++k) {
        acc += jumps[k];
        cum[k] = cap ? std::min(acc, *cap) : acc;
    }
    return StepFunction(times, std::move(cum), cap);
}

}  // namespace detail

// Pseudo-likelihood fit: treats each subject's cumulative count at each
// observation time as an independent Poisson observation of Lambda(t). The
// maximizer over nondecreasing functions is the isotonic regression of the
// pooled cumulative counts, weighted by multiplicity at tied times.
inline PseudoFit fit_pseudo(const WeightedIntervals& wi, std::optional<double> cap = std::nullopt)
{
    struct Point { double t; double y; };
    std::vector<Point> pts;
    for (const auto& s : wi.subjects) {
        double acc = 0.0;
        for (const auto& iv : s) {
            if (!iv.included)
                throw std::invalid_argument("fit_pseudo: every interval needs a weight");
            if (!std::isfinite(iv.weight) || iv.weight < 0.0)
                throw std::invalid_argument("weights must be finite and nonnegative");
            acc += iv.weight;
            pts.push_back({iv.t, acc});
        }
    }
    if (pts.empty()) throw std::invalid_argument("fit_pseudo: no intervals");
    std::stable_sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.t < b.t; });

    std::vector<double> times, sums, counts;
    for (const auto& p : pts) {
        if (times.empty() || p.t != times.back()) {
            times.push_back(p.t);
            sums.push_back(0.0);
            counts.push_back(0.0);
        }
        sums.back() += p.y;
        counts.back() += 1.0;
    }

    PseudoFit out;
    if (std::all_of(sums.begin(), sums.end(), [](double v) { return v == 0.0; })) {
        out.degenerate = true;
        out.fn = StepFunction(times, std::vector<double>(times.size(), 0.0), cap);
        return out;
    }

    // Pool adjacent violators.
    struct Block { double sum; double weight; std::size_t first; std::size_t last; double mean() const { return sum / weight; } };
    std::vector<Block> blocks;
    for (std::size_t k = 0; k < times.size(); ++k) {
        blocks.push_back({sums[k], counts[k], k, k});
        while (blocks.size() > 1 && blocks[blocks.size() - 2].mean() > blocks.back().mean()) {
            Block top = blocks.back();
            blocks.pop_back();
            auto& prev = blocks.back();
            prev.sum += top.sum;
            prev.weight += top.weight;
            prev.last = top.last;
        }
    }
    std::vector<double> fitted(times.size());
    for (const auto& b : blocks) {
        const double v = b.mean();
        for (std::size_t k = b.first; k <= b.last; ++k) fitted[k] = cap ? std::min(v, *cap) : v;
    }
    out.fn = StepFunction(std::move(times), std::move(fitted), cap);
    return out;
}

namespace detail {

// Projected Newton steps from lambda until the projected gradient is below
// kkt_tol, the line search fails or max_steps is reached. Appends the
// objective after each step to the trace.
struct PolishResult
{
    std::size_t steps = 0;
    bool converged = false;
    bool stalled = false;
};

inline PolishResult projected_newton(const Design& d, MleWorkspace& ws, std::vector<double>& lambda,
                                     const MleOptions& opt, std::size_t max_steps, std::vector<double>& trace)
{
    const std::size_t m = d.grid_size();
    const auto& cov = d.grid.coverage();
    std::vector<double> next(m), dir(m);
    std::vector<char> is_free(m);
    PolishResult res;
    ws.objective(lambda);
    ws.gradient();
    double residual = projected_residual(lambda, ws.grad(), cov);
    double damping = 1e-6;
    while (true) {
        if (residual <= opt.kkt_tol) {
            res.converged = true;
            return res;
        }
        if (res.steps >= max_steps) return res;
        const auto& grad = ws.grad();
        const auto& curv = ws.curvature();
        // Bound set: jumps pushed outward whose own Newton step would reach zero.
        for (std::size_t g = 0; g < m; ++g) {
            const bool bound = grad[g] < 0.0 && (curv[g] == 0.0 || lambda[g] <= -grad[g] / curv[g]);
            is_free[g] = cov[g] > 0.0 && !bound && !(lambda[g] == 0.0 && grad[g] <= 0.0);
        }
        if (!newton_direction(d, ws.increments(), grad, curv, is_free, damping, dir)) {
            for (std::size_t g = 0; g < m; ++g) dir[g] = is_free[g] ? grad[g] : 0.0;
        }
        // Bound jumps take a curvature-scaled gradient step towards zero.
        for (std::size_t g = 0; g < m; ++g) {
            if (is_free[g]) continue;
            dir[g] = curv[g] > 0.0 ? std::max(-lambda[g], grad[g] / ((1.0 + damping) * curv[g])) : -lambda[g];
        }

        bool accepted = false;
        double alpha = 1.0;
        for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
            double pred = 0.0;
            for (std::size_t g = 0; g < m; ++g) {
                next[g] = std::max(0.0, lambda[g] + alpha * dir[g]);
                pred += grad[g] * (next[g] - lambda[g]);
            }
            const double gain = ws.change_to(lambda, next);
            if (gain >= 1e-4 * std::max(pred, 0.0) && gain >= 0.0) {
                accepted = true;
                break;
            }
        }
        // Flat directions make the quadratic model unbounded; damp harder when the step is cut.
        if (alpha == 1.0) damping = std::max(damping * 0.1, 1e-12);
        if (alpha < 0.25) damping = std::min(damping * 10.0, 1e6);
        if (!accepted) {
            res.converged = residual <= std::max(opt.kkt_tol, 1e-6);
            res.stalled = !res.converged;
            return res;
        }
        double change = 0.0;
        for (std::size_t g = 0; g < m; ++g) change = std::max(change, std::abs(next[g] - lambda[g]));
        lambda.swap(next);
        ++res.steps;
        trace.push_back(ws.objective(lambda));
        ws.gradient();
        residual = projected_residual(lambda, ws.grad(), cov);
        if (change < opt.tol * 1e-6 && residual <= std::max(opt.kkt_tol, 1e-6)) {
            res.converged = true;
            return res;
        }
    }
}

}  // namespace detail

// Full-likelihood fit over step functions jumping on the pooled grid:
//   maximize  sum_I [ w_I log(sum_{g in I} lambda_g) - sum_{g in I} lambda_g ],  lambda >= 0.
// Starts from uniform mass and runs the latent-count multiplicative update
//   lambda_g <- lambda_g * (sum_{I ni g} w_I / D_I) / m_g
// for a few iterations, then an interior-point phase, then projected Newton
// steps until the projected gradient is below kkt_tol. A warm start skips
// straight to the Newton steps and falls back to the interior-point phase if
// they do not converge quickly. The objective trace holds the best objective
// reached after each inner iteration.
inline MleFit fit_mle(const WeightedIntervals& wi, const MleOptions& opt = {})
{
    if (!(opt.tol > 0.0)) throw std::invalid_argument("fit_mle: tol must be > 0");
    const detail::Design d = detail::make_design(wi);
    const std::size_t m = d.grid_size();
    const auto& cov = d.grid.coverage();
    const auto& times = d.grid.times();

    MleFit out;
    std::vector<double> lambda(m, 0.0);
    const double total_w = std::accumulate(d.w.begin(), d.w.end(), 0.0);
    const double total_m = std::accumulate(cov.begin(), cov.end(), 0.0);
    if (total_w == 0.0 || m == 0) {
        out.fn = detail::finish_step_function(times, lambda, opt.cap);
        out.converged = true;
        out.status = "zero weights";
        out.objective_trace.push_back(0.0);
        return out;
    }

    // Jumps covered by a positive-weight interval; all others are zero at the optimum.
    std::vector<char> active(m, 0);
    std::size_t n_active = 0;
    {
        std::vector<double> mark(m + 1, 0.0);
        for (std::size_t k = 0; k < d.n_intervals(); ++k) {
            if (d.w[k] == 0.0) continue;
            mark[d.lo[k]] += 1.0;
            mark[d.hi[k] + 1] -= 1.0;
        }
        double run = 0.0;
        for (std::size_t g = 0; g < m; ++g) {
            run += mark[g];
            active[g] = run > 0.5;
            n_active += active[g];
        }
    }

    detail::MleWorkspace ws(d);
    bool warm = false;
    if (opt.start) {
        double prev = 0.0;
        for (std::size_t g = 0; g < m; ++g) {
            const double v = opt.start->eval(times[g]);
            lambda[g] = active[g] ? std::max(v - prev, 0.0) : 0.0;
            prev = v;
        }
        warm = std::isfinite(ws.objective(lambda));
    }
    if (!warm)
        for (std::size_t g = 0; g < m; ++g) lambda[g] = cov[g] > 0.0 ? total_w / total_m : 0.0;

    double f = ws.objective(lambda);
    ws.gradient();
    out.objective_trace.push_back(f);
    double residual = detail::projected_residual(lambda, ws.grad(), cov);
    std::size_t iter = 0;
    std::vector<double> steps;
    auto record = [&](const std::vector<double>& objectives) {
        for (double o : objectives) {
            f = std::max(f, o);
            out.objective_trace.push_back(f);
        }
        iter += objectives.size();
    };

    bool done = residual <= opt.kkt_tol;
    bool stalled = false;
    if (warm && !done) {
        const auto r = detail::projected_newton(d, ws, lambda, opt, std::min<std::size_t>(30, opt.max_iter), steps);
        record(steps);
        done = r.converged;
    } else if (!done) {
        // Multiplicative warm-up: a minorize-maximize step, so a negative gain can only come from rounding.
        std::vector<double> next(m);
        while (iter < std::min(opt.warmup, opt.max_iter) && residual > opt.kkt_tol) {
            const auto& s = ws.ratio_sums();
            for (std::size_t g = 0; g < m; ++g) next[g] = cov[g] > 0.0 ? lambda[g] * (s[g] / cov[g]) : 0.0;
            if (!(ws.change_to(lambda, next) >= 0.0)) break;
            lambda.swap(next);
            ++iter;
            f = ws.objective(lambda);
            ws.gradient();
            out.objective_trace.push_back(f);
            residual = detail::projected_residual(lambda, ws.grad(), cov);
        }
        done = residual <= opt.kkt_tol;
    }

    if (!done && iter < opt.max_iter) {
        std::vector<double> start(m, 0.0);
        const double floor = 1e-2 * total_w / total_m;
        for (std::size_t g = 0; g < m; ++g)
            if (active[g]) start[g] = std::max(lambda[g], floor);
        std::vector<double> best;
        double best_f = f;
        steps.clear();
        detail::interior_point(d, ws, start, active, total_w / static_cast<double>(n_active), 1e-11,
                               opt.max_iter - iter, steps, best, best_f);
        record(steps);
        if (!best.empty()) lambda = best;

        steps.clear();
        const auto r = detail::projected_newton(d, ws, lambda, opt, opt.max_iter - std::min(iter, opt.max_iter), steps);
        record(steps);
        done = r.converged;
        stalled = r.stalled;
    }

    ws.objective(lambda);
    ws.gradient();
    residual = detail::projected_residual(lambda, ws.grad(), cov);
    out.converged = done || residual <= opt.kkt_tol;
    out.status = out.converged ? "converged" : stalled ? "stalled" : "max_iter";

    detail::canonicalize_flat_runs(d, lambda);
    out.iterations = iter;
    out.kkt_residual = residual;
    out.fn = detail::finish_step_function(times, lambda, opt.cap);
    return out;
}

// Complete-case fit: intervals with missing counts are dropped from the
// likelihood but still contribute jump points.
inline MleFit fit_drop_missing(const PanelDataset& dataset, const MleOptions& opt = {})
{
    if (dataset.observed_count() == 0) throw data_error("fit_drop_missing: no observed intervals");
    return fit_mle(observed_weights(dataset), opt);
}

// Unnormalized complete-data objective of fit_mle evaluated at any step function.
inline double mle_objective(const WeightedIntervals& wi, const StepFunction& f)
{
    double total = 0.0;
    for (const auto& s : wi.subjects)
        for (const auto& iv : s) {
            if (!iv.included) continue;
            total += detail::loglik_term(iv.weight, f.eval(iv.t) - f.eval(iv.t_prev));
        }
    return total;
}

struct KktReport
{
    std::vector<double> grid;
    std::vector<double> jumps;
    std::vector<double> gradient;  // sum over covering intervals of (w / Delta - 1)
    double max_residual = 0.0;
};

// First-order optimality of a step function for the fit_mle objective,
// checked at every grid point.
inline KktReport mle_kkt(const WeightedIntervals& wi, const StepFunction& f)
{
    const detail::Design d = detail::make_design(wi);
    KktReport rep;
    rep.grid = d.grid.times();
    const std::size_t m = rep.grid.size();
    rep.jumps.resize(m);
    double prev = 0.0;
    for (std::size_t g = 0; g < m; ++g) {
        const double v = f.eval(rep.grid[g]);
        rep.jumps[g] = v - prev;
        prev = v;
    }
    // Positive weight on a zero increment makes the derivative +inf on that interval.
    std::vector<double> diff(m + 1, 0.0), infinite(m + 1, 0.0);
    for (std::size_t k = 0; k < d.n_intervals(); ++k) {
        if (d.w[k] == 0.0) continue;
        const double D = f.eval(rep.grid[d.hi[k]]) - (d.lo[k] == 0 ? 0.0 : f.eval(rep.grid[d.lo[k] - 1]));
        auto& target = D > 0.0 ? diff : infinite;
        const double r = D > 0.0 ? d.w[k] / D : 1.0;
        target[d.lo[k]] += r;
        target[d.hi[k] + 1] -= r;
    }
    rep.gradient.resize(m);
    double run = 0.0, inf_run = 0.0;
    for (std::size_t g = 0; g < m; ++g) {
        run += diff[g];
        inf_run += infinite[g];
        rep.gradient[g] = inf_run > 0.5 ? std::numeric_limits<double>::infinity() : run - d.grid.coverage()[g];
    }
    rep.max_residual = detail::projected_residual(rep.jumps, rep.gradient, d.grid.coverage());
    return rep;
}

}  // namespace pcem

#endif  // PCEM_MSTEP_HPP
