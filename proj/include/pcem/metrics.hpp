#ifndef PCEM_METRICS_HPP
#define PCEM_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pcem/numfmt.hpp"
#include "pcem/panel.hpp"
#include "pcem/stepfn.hpp"

namespace pcem {

struct PairMass
{
    double u = 0.0;
    double v = 0.0;
    double mass = 0.0;

    bool operator==(const PairMass&) const = default;
};

// Empirical measure on consecutive observation pairs (T_{j-1}, T_j), T_0 = 0.
class EmpiricalPairMeasure
{
public:
    EmpiricalPairMeasure() = default;
    explicit EmpiricalPairMeasure(std::vector<PairMass> pairs) : pairs_(std::move(pairs))
    {
        for (const auto& p : pairs_) {
            if (!(p.mass > 0.0) || !std::isfinite(p.mass))
                throw std::invalid_argument("EmpiricalPairMeasure: masses must be positive");
            if (!(p.u >= 0.0 && p.u < p.v)) throw std::invalid_argument("EmpiricalPairMeasure: need 0 <= u < v");
        }
    }

    // Every interval of every subject, mass 1/n each.
    static EmpiricalPairMeasure from_dataset(const PanelDataset& dataset)
    {
        if (dataset.empty()) throw std::invalid_argument("EmpiricalPairMeasure: empty dataset");
        const double mass = 1.0 / static_cast<double>(dataset.size());
        std::vector<PairMass> pairs;
        pairs.reserve(dataset.interval_count());
        for (const auto& tr : dataset.trajectories())
            for (const auto& iv : tr.intervals()) pairs.push_back({iv.t_prev, iv.t, mass});
        return EmpiricalPairMeasure(std::move(pairs));
    }

    EmpiricalPairMeasure scaled(double factor) const
    {
        std::vector<PairMass> p = pairs_;
        for (auto& x : p) x.mass *= factor;
        return EmpiricalPairMeasure(std::move(p));
    }

    const std::vector<PairMass>& pairs() const { return pairs_; }
    std::size_t size() const { return pairs_.size(); }
    bool empty() const { return pairs_.empty(); }
    double total_mass() const
    {
        double s = 0.0;
        for (const auto& p : pairs_) s += p.mass;
        return s;
    }

private:
    std::vector<PairMass> pairs_;
};

// sqrt( sum_pairs mass * [(f(v) - f(u)) - (g(v) - g(u))]^2 )
template <class F, class G>
double d2_distance(const F& f, const G& g, const EmpiricalPairMeasure& measure)
{
    if (measure.empty()) throw std::invalid_argument("d2_distance: empty pair measure");
    double s = 0.0;
    for (const auto& p : measure.pairs()) {
        const double diff = (f(p.v) - f(p.u)) - (g(p.v) - g(p.u));
        s += p.mass * diff * diff;
    }
    return std::sqrt(s);
}

struct GridErrors
{
    double sup = 0.0;
    double rmse = 0.0;
};

template <class Truth>
GridErrors grid_errors(const StepFunction& f, const Truth& truth, std::span<const double> grid)
{
    if (grid.empty()) throw std::invalid_argument("grid_errors: empty grid");
    GridErrors e;
    double ss = 0.0;
    for (double t : grid) {
        const double d = std::abs(f.eval(t) - truth(t));
        e.sup = std::max(e.sup, d);
        ss += d * d;
    }
    e.rmse = std::sqrt(ss / static_cast<double>(grid.size()));
    return e;
}

// count equally spaced points from lo to hi inclusive.
inline std::vector<double> linspace(double lo, double hi, std::size_t count)
{
    if (count == 0) throw std::invalid_argument("linspace: count must be >= 1");
    if (!(lo <= hi)) throw std::invalid_argument("linspace: need lo <= hi");
    std::vector<double> g(count);
    if (count == 1) {
        g[0] = lo;
        return g;
    }
    for (std::size_t k = 0; k < count; ++k)
        g[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(count - 1);
    g.back() = hi;
    return g;
}

struct ContractionConstants
{
    double gamma = 0.0;
    double nu = 0.0;
    double kappa = 0.0;
    double threshold = 0.0;  // c / (3b + c)
    bool contracts = false;
};

inline ContractionConstants contraction_constants(double epsilon, double c, double b)
{
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw std::invalid_argument("contraction_constants: need 0 <= eps < 1");
    if (!(c > 0.0) || !std::isfinite(c)) throw std::invalid_argument("contraction_constants: need c > 0");
    if (!(b > 0.0) || !std::isfinite(b)) throw std::invalid_argument("contraction_constants: need b > 0");
    ContractionConstants k;
    k.gamma = epsilon / c;
    k.nu = (1.0 - epsilon) / (3.0 * b);
    k.kappa = k.gamma / k.nu;
    k.threshold = c / (3.0 * b + c);
    k.contracts = epsilon * (3.0 * b + c) < c;
    return k;
}

struct HBoundCheck
{
    double h = 0.0;
    double bound = 0.0;
    bool in_range = false;  // x in (0, 2), where the inequality is claimed
    bool holds = false;
};

// h(x) = x (log x - 1) + 1 against (x - 1)^2 / 3.
inline HBoundCheck h_lower_bound_check(double x)
{
    if (!(x > 0.0) || !std::isfinite(x)) throw std::invalid_argument("h_lower_bound_check: need finite x > 0");
    HBoundCheck r;
    r.h = x * (std::log(x) - 1.0) + 1.0;
    r.bound = (x - 1.0) * (x - 1.0) / 3.0;
    r.in_range = x < 2.0;
    r.holds = r.h >= r.bound - 1e-12;
    return r;
}

inline void write_metric_csv(std::ostream& out, const std::vector<std::pair<std::string, double>>& rows)
{
    out << "metric,value\n";
    for (const auto& [name, value] : rows) out << name << ',' << format_double(value) << '\n';
}

}  // namespace pcem

#endif  // PCEM_METRICS_HPP
