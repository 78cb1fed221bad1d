#ifndef PCEM_SIMULATE_HPP
#define PCEM_SIMULATE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pcem/panel.hpp"
#include "pcem/rng.hpp"

namespace pcem {

enum class MeanKind { sqrt, square, linear, table };

inline const char* to_string(MeanKind k)
{
    switch (k) {
    case MeanKind::sqrt: return "sqrt";
    case MeanKind::square: return "square";
    case MeanKind::linear: return "linear";
    case MeanKind::table: return "table";
    }
    return "unknown";
}

// True mean function of the simulated process. A table is a list of
// (time, value) nodes joined linearly from (0, 0) and held constant after
// the last node.
struct MeanFunctionSpec
{
    MeanKind kind = MeanKind::sqrt;
    double tau0 = 0.1;
    double tau = 10.0;
    std::vector<std::pair<double, double>> table;
    bool frailty = false;  // subject multiplier X ~ uniform(0, 2)

    void check() const
    {
        if (!(tau0 >= 0.0 && tau0 < tau) || !std::isfinite(tau))
            throw std::invalid_argument("MeanFunctionSpec: need 0 <= tau0 < tau");
        if (kind != MeanKind::table) return;
        if (table.empty()) throw std::invalid_argument("MeanFunctionSpec: empty table");
        double pt = 0.0, pv = 0.0;
        for (const auto& [t, v] : table) {
            if (!std::isfinite(t) || !std::isfinite(v) || !(t > pt) || v < pv)
                throw std::invalid_argument(
                    "MeanFunctionSpec: table times must increase from 0 and values must be nondecreasing from 0");
            pt = t;
            pv = v;
        }
    }

    double operator()(double u) const
    {
        if (u <= 0.0) return 0.0;
        switch (kind) {
        case MeanKind::sqrt: return std::sqrt(u);
        case MeanKind::square: return u * u;
        case MeanKind::linear: return u;
        case MeanKind::table: {
            double pt = 0.0, pv = 0.0;
            for (const auto& [t, v] : table) {
                if (u <= t) return pv + (v - pv) * (u - pt) / (t - pt);
                pt = t;
                pv = v;
            }
            return pv;
        }
        }
        return 0.0;
    }
};

struct ScheduleSpec
{
    std::size_t k = 30;
    double tau0 = 0.1;
    double tau = 10.0;
    double alpha = 0.0;

    void check() const
    {
        if (k == 0) throw std::invalid_argument("ScheduleSpec: K must be >= 1");
        if (!(tau0 >= 0.0 && tau0 < tau) || !std::isfinite(tau))
            throw std::invalid_argument("ScheduleSpec: need 0 <= tau0 < tau");
        if (!(alpha >= 0.0)) throw std::invalid_argument("ScheduleSpec: alpha must be >= 0");
        if (!(static_cast<double>(k) * alpha < tau - tau0))
            throw std::invalid_argument("ScheduleSpec: K * alpha must be below the window length");
    }
};

// K sorted times in [tau0, tau] with gaps >= alpha, uniform over that set:
// sorted uniforms on the shrunken window [0, L - (K-1) alpha], then the j-th
// order statistic is shifted by j * alpha.
inline std::vector<double> sample_schedule(const ScheduleSpec& spec, Rng& rng)
{
    spec.check();
    const double slack = (spec.tau - spec.tau0) - static_cast<double>(spec.k - 1) * spec.alpha;
    std::vector<double> u(spec.k);
    for (auto& x : u) {
        do {
            x = spec.tau0 + draw_uniform(rng, 0.0, slack);
        } while (!(x > 0.0));
    }
    std::sort(u.begin(), u.end());
    for (std::size_t j = 0; j < u.size(); ++j) u[j] = std::min(spec.tau, u[j] + static_cast<double>(j) * spec.alpha);
    for (std::size_t j = 1; j < u.size(); ++j)
        if (!(u[j] > u[j - 1])) u[j] = std::nextafter(u[j - 1], spec.tau + 1.0);
    return u;
}

// Panel counts of a (mixed) Poisson process: subject i draws its frailty,
// schedule and increments dN_j ~ Poisson(X * dLambda*(T_j)) from stream (seed, i).
inline PanelDataset sample_panel(const MeanFunctionSpec& mean, const ScheduleSpec& sched, std::size_t n,
                                 std::uint64_t seed)
{
    if (n == 0) throw std::invalid_argument("sample_panel: n must be >= 1");
    mean.check();
    sched.check();
    std::vector<Trajectory> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = make_stream(seed, i);
        const double x = mean.frailty ? draw_uniform(rng, 0.0, 2.0) : 1.0;
        const std::vector<double> times = sample_schedule(sched, rng);
        std::vector<IntervalObservation> ivs;
        ivs.reserve(times.size());
        double prev = 0.0;
        for (double t : times) {
            const double inc = std::max(0.0, mean(t) - mean(prev));
            ivs.push_back({prev, t, draw_poisson(rng, x * inc)});
            prev = t;
        }
        out.emplace_back(std::to_string(i + 1), std::move(ivs));
    }
    StudyDesign design{sched.tau0, sched.tau, sched.k, sched.alpha};
    return PanelDataset(std::move(out), design);
}

struct Mcar
{
    double eps = 0.2;
};
// Subject-level rate eps_mean * X with X ~ uniform(0, 2).
struct Heterogeneous
{
    double eps_mean = 0.2;
};
// Rate depends on whether the previous interval's count was zero.
struct Mar
{
    double eps_zero = 0.1;
    double eps_pos = 0.3;
};
using MissingnessSpec = std::variant<Mcar, Heterogeneous, Mar>;

inline std::string describe(const MissingnessSpec& spec)
{
    if (std::holds_alternative<Mcar>(spec)) return "mcar";
    if (std::holds_alternative<Heterogeneous>(spec)) return "het";
    return "mar";
}

inline void check(const MissingnessSpec& spec)
{
    auto prob = [](double p, const char* what) {
        if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument(std::string(what) + " must be in [0, 1)");
    };
    if (const auto* m = std::get_if<Mcar>(&spec)) prob(m->eps, "mcar eps");
    if (const auto* h = std::get_if<Heterogeneous>(&spec)) {
        if (!(h->eps_mean >= 0.0 && h->eps_mean < 0.5))
            throw std::invalid_argument("het eps_mean must be in [0, 0.5) so that 2 * eps_mean < 1");
    }
    if (const auto* a = std::get_if<Mar>(&spec)) {
        prob(a->eps_zero, "mar eps_zero");
        prob(a->eps_pos, "mar eps_pos");
    }
}

// Masks counts as missing under the given mechanism; subject i draws from stream (seed, i).
// Existing missing counts stay missing. For MAR the rate of interval j uses
// the count of interval j-1 as it was before this call; the first interval,
// or one following an already-missing count, uses eps_zero.
inline PanelDataset corrupt(const PanelDataset& dataset, const MissingnessSpec& spec, std::uint64_t seed)
{
    check(spec);
    std::vector<Trajectory> out;
    out.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        Rng rng = make_stream(seed, i);
        const auto& tr = dataset[i];
        double subject_rate = 0.0;
        if (const auto* m = std::get_if<Mcar>(&spec)) subject_rate = m->eps;
        if (const auto* h = std::get_if<Heterogeneous>(&spec)) subject_rate = h->eps_mean * draw_uniform(rng, 0.0, 2.0);
        const auto* mar = std::get_if<Mar>(&spec);
        std::vector<IntervalObservation> ivs(tr.intervals().begin(), tr.intervals().end());
        for (std::size_t j = 0; j < ivs.size(); ++j) {
            double rate = subject_rate;
            if (mar) {
                const bool prev_positive = j > 0 && tr[j - 1].count && *tr[j - 1].count > 0.0;
                rate = prev_positive ? mar->eps_pos : mar->eps_zero;
            }
            const double u = draw_uniform(rng, 0.0, 1.0);
            if (u < rate) ivs[j].count.reset();
        }
        out.emplace_back(tr.subject_id(), std::move(ivs));
    }
    return PanelDataset(std::move(out), dataset.design());
}

// Biased comparator: every missing count treated as an observed zero.
inline PanelDataset zero_fill_baseline(const PanelDataset& dataset)
{
    std::vector<Trajectory> out;
    out.reserve(dataset.size());
    for (const auto& tr : dataset.trajectories()) {
        std::vector<IntervalObservation> ivs(tr.intervals().begin(), tr.intervals().end());
        for (auto& iv : ivs)
            if (!iv.count) iv.count = 0.0;
        out.emplace_back(tr.subject_id(), std::move(ivs));
    }
    return PanelDataset(std::move(out), dataset.design());
}

}  // namespace pcem

#endif  // PCEM_SIMULATE_HPP
