#ifndef PCEM_STEPFN_HPP
#define PCEM_STEPFN_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace pcem {

// Nondecreasing right-continuous step function with value 0 before its first
// jump. This is the representation used for every mean-function estimate.
class StepFunction
{
public:
    StepFunction() = default;

    StepFunction(std::vector<double> jump_times, std::vector<double> cum_values,
                 std::optional<double> cap = std::nullopt)
        : times_(std::move(jump_times)), values_(std::move(cum_values)), cap_(cap)
    {
        if (times_.size() != values_.size())
            throw std::invalid_argument("StepFunction: jump_times and cum_values differ in length");
        for (std::size_t k = 0; k < times_.size(); ++k) {
            if (!std::isfinite(times_[k]) || !(times_[k] > 0.0))
                throw std::invalid_argument("StepFunction: jump times must be finite and positive");
            if (k > 0 && !(times_[k] > times_[k - 1]))
                throw std::invalid_argument("StepFunction: jump times must be strictly increasing");
            if (!std::isfinite(values_[k]) || values_[k] < 0.0)
                throw std::invalid_argument("StepFunction: values must be finite and nonnegative");
            if (k > 0 && values_[k] < values_[k - 1])
                throw std::invalid_argument("StepFunction: values must be nondecreasing");
        }
        if (cap_) {
            if (!(*cap_ >= 0.0)) throw std::invalid_argument("StepFunction: cap must be >= 0");
            if (!values_.empty() && values_.back() > *cap_)
                throw std::invalid_argument("StepFunction: last value exceeds cap");
        }
    }

    // Builds the function from per-time jump sizes (each >= 0).
    static StepFunction from_jumps(std::vector<double> jump_times, std::span<const double> jumps,
                                   std::optional<double> cap = std::nullopt)
    {
        if (jump_times.size() != jumps.size())
            throw std::invalid_argument("StepFunction::from_jumps: size mismatch");
        std::vector<double> cum(jumps.size());
        double acc = 0.0;
        for (std::size_t k = 0; k < jumps.size(); ++k) {
            acc += jumps[k];
            cum[k] = acc;
        }
        return StepFunction(std::move(jump_times), std::move(cum), cap);
    }

    double eval(double t) const
    {
        if (t < 0.0) throw std::invalid_argument("StepFunction::eval: negative time");
        auto it = std::upper_bound(times_.begin(), times_.end(), t);
        if (it == times_.begin()) return 0.0;
        return values_[static_cast<std::size_t>(it - times_.begin()) - 1];
    }

    double operator()(double t) const { return eval(t); }

    double increment(double a, double b) const
    {
        if (!(a < b)) throw std::invalid_argument("StepFunction::increment: requires a < b");
        return eval(b) - eval(a);
    }

    const std::vector<double>& jump_times() const { return times_; }
    const std::vector<double>& cum_values() const { return values_; }
    const std::optional<double>& cap() const { return cap_; }
    std::size_t size() const { return times_.size(); }
    bool empty() const { return times_.empty(); }
    double total() const { return values_.empty() ? 0.0 : values_.back(); }

    bool operator==(const StepFunction&) const = default;

private:
    std::vector<double> times_;
    std::vector<double> values_;
    std::optional<double> cap_;
};

// Exact sup |f - g| over [lo, hi]: both functions are constant between their
// jumps, so the maximum is attained at a jump time or at the window start.
inline double sup_distance(const StepFunction& f, const StepFunction& g, double lo, double hi)
{
    if (!(lo < hi)) throw std::invalid_argument("sup_distance: empty window");
    double best = std::abs(f.eval(lo) - g.eval(lo));
    best = std::max(best, std::abs(f.eval(hi) - g.eval(hi)));
    for (const auto* h : {&f, &g}) {
        const auto& ts = h->jump_times();
        auto first = std::lower_bound(ts.begin(), ts.end(), lo);
        auto last = std::upper_bound(ts.begin(), ts.end(), hi);
        for (auto it = first; it != last; ++it) best = std::max(best, std::abs(f.eval(*it) - g.eval(*it)));
    }
    return best;
}

inline void to_json(nlohmann::json& j, const StepFunction& f)
{
    j = nlohmann::json{{"jump_times", f.jump_times()}, {"cum_values", f.cum_values()}};
    if (f.cap()) j["cap"] = *f.cap();
}

inline void from_json(const nlohmann::json& j, StepFunction& f)
{
    std::optional<double> cap;
    if (j.contains("cap") && !j.at("cap").is_null()) cap = j.at("cap").get<double>();
    f = StepFunction(j.at("jump_times").get<std::vector<double>>(),
                     j.at("cum_values").get<std::vector<double>>(), cap);
}

}  // namespace pcem

#endif  // PCEM_STEPFN_HPP
