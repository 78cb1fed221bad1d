#ifndef PCEM_PANEL_HPP
#define PCEM_PANEL_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcem/error.hpp"
#include "pcem/numfmt.hpp"

namespace pcem {

// One panel interval (t_prev, t] with its event count. An empty count means
// the increment was not reported. Counts are reals so that imputed values
// can live in the same type; integrality of raw data is enforced at ingestion.
struct IntervalObservation
{
    double t_prev = 0.0;
    double t = 0.0;
    std::optional<double> count;

    bool missing() const { return !count.has_value(); }
    bool operator==(const IntervalObservation&) const = default;
};

class Trajectory
{
public:
    Trajectory(std::string subject_id, std::vector<IntervalObservation> intervals)
        : id_(std::move(subject_id)), intervals_(std::move(intervals))
    {
        if (intervals_.empty())
            throw data_error("subject " + id_ + ": trajectory has no intervals");
        double expected_start = 0.0;  // T_0 = 0
        for (std::size_t j = 0; j < intervals_.size(); ++j) {
            const auto& iv = intervals_[j];
            const std::string where = "subject " + id_ + ", interval " + std::to_string(j + 1);
            if (!std::isfinite(iv.t_prev) || !std::isfinite(iv.t))
                throw data_error(where + ": non-finite time");
            if (iv.t_prev != expected_start)
                throw data_error(where + ": intervals are not contiguous (t_prev = " +
                                 format_double(iv.t_prev) + ", expected " +
                                 format_double(expected_start) + ")");
            if (!(iv.t_prev < iv.t))
                throw data_error(where + ": t_prev must be < t");
            if (iv.count && (!std::isfinite(*iv.count) || *iv.count < 0.0))
                throw data_error(where + ": count must be a finite nonnegative number");
            expected_start = iv.t;
        }
    }

    const std::string& subject_id() const { return id_; }
    std::span<const IntervalObservation> intervals() const { return intervals_; }
    const IntervalObservation& operator[](std::size_t j) const { return intervals_[j]; }
    std::size_t size() const { return intervals_.size(); }
    double last_time() const { return intervals_.back().t; }

    std::size_t observed_count() const
    {
        return static_cast<std::size_t>(std::count_if(
            intervals_.begin(), intervals_.end(), [](const auto& iv) { return !iv.missing(); }));
    }

    bool operator==(const Trajectory&) const = default;

private:
    std::string id_;
    std::vector<IntervalObservation> intervals_;
};

// Study-window metadata. Any field may be absent, in which case validation
// infers the tightest value consistent with the data.
struct StudyDesign
{
    std::optional<double> tau0;
    std::optional<double> tau;
    std::optional<std::size_t> k0;
    std::optional<double> alpha;

    bool operator==(const StudyDesign&) const = default;
};

class PanelDataset
{
public:
    PanelDataset() = default;
    explicit PanelDataset(std::vector<Trajectory> trajectories, StudyDesign design = {})
        : trajectories_(std::move(trajectories)), design_(design)
    {
    }

    const std::vector<Trajectory>& trajectories() const { return trajectories_; }
    const Trajectory& operator[](std::size_t i) const { return trajectories_[i]; }
    const StudyDesign& design() const { return design_; }
    std::size_t size() const { return trajectories_.size(); }
    bool empty() const { return trajectories_.empty(); }

    std::size_t interval_count() const
    {
        std::size_t k = 0;
        for (const auto& tr : trajectories_) k += tr.size();
        return k;
    }

    std::size_t observed_count() const
    {
        std::size_t k = 0;
        for (const auto& tr : trajectories_) k += tr.observed_count();
        return k;
    }

    bool has_missing() const { return observed_count() != interval_count(); }

    double max_time() const
    {
        double m = 0.0;
        for (const auto& tr : trajectories_) m = std::max(m, tr.last_time());
        return m;
    }

    // Upper end of the study window: declared tau, else the last observation.
    double window_end() const { return design_.tau.value_or(max_time()); }

    PanelDataset with_design(StudyDesign design) const
    {
        return PanelDataset(trajectories_, design);
    }

    bool operator==(const PanelDataset&) const = default;

private:
    std::vector<Trajectory> trajectories_;
    StudyDesign design_;
};

enum class Assumption
{
    observation_window,    // T_j in [tau0, tau]
    bounded_observations,  // K <= k0
    alpha_separation,      // T_j - T_{j-1} >= alpha for j >= 2
};

inline const char* to_string(Assumption a)
{
    switch (a) {
    case Assumption::observation_window: return "observation_window";
    case Assumption::bounded_observations: return "bounded_observations";
    case Assumption::alpha_separation: return "alpha_separation";
    }
    return "unknown";
}

struct Violation
{
    Assumption assumption;
    std::string subject_id;
    std::size_t interval = 0;  // 1-based; 0 when the violation concerns the whole trajectory
    double value = 0.0;
    double bound = 0.0;

    bool operator==(const Violation&) const = default;
};

// Bounds computed from the data alone.
struct ObservedDesign
{
    double tau0 = 0.0;
    double tau = 0.0;
    std::size_t k0 = 0;
    std::optional<double> alpha;  // absent when no trajectory has two observations

    bool operator==(const ObservedDesign&) const = default;
};

struct ValidationReport
{
    std::vector<Violation> violations;
    StudyDesign declared;
    ObservedDesign observed;
    StudyDesign effective;                 // declared where present, inferred otherwise
    std::vector<std::string> inferred;     // names of fields that were inferred

    bool ok() const { return violations.empty(); }
    bool operator==(const ValidationReport&) const = default;
};

inline ValidationReport validate(const PanelDataset& dataset)
{
    ValidationReport report;
    report.declared = dataset.design();

    ObservedDesign obs;
    obs.tau0 = std::numeric_limits<double>::infinity();
    for (const auto& tr : dataset.trajectories()) {
        obs.k0 = std::max(obs.k0, tr.size());
        obs.tau = std::max(obs.tau, tr.last_time());
        obs.tau0 = std::min(obs.tau0, tr[0].t);
        for (std::size_t j = 1; j < tr.size(); ++j) {
            const double gap = tr[j].t - tr[j - 1].t;
            obs.alpha = obs.alpha ? std::min(*obs.alpha, gap) : gap;
        }
    }
    if (dataset.empty()) obs.tau0 = 0.0;
    report.observed = obs;

    StudyDesign eff = report.declared;
    if (!eff.tau0) { eff.tau0 = obs.tau0; report.inferred.push_back("tau0"); }
    if (!eff.tau) { eff.tau = obs.tau; report.inferred.push_back("tau"); }
    if (!eff.k0) { eff.k0 = obs.k0; report.inferred.push_back("k0"); }
    if (!eff.alpha) { eff.alpha = obs.alpha.value_or(0.0); report.inferred.push_back("alpha"); }
    report.effective = eff;

    for (const auto& tr : dataset.trajectories()) {
        if (tr.size() > *eff.k0)
            report.violations.push_back({Assumption::bounded_observations, tr.subject_id(), 0,
                                         static_cast<double>(tr.size()),
                                         static_cast<double>(*eff.k0)});
        for (std::size_t j = 0; j < tr.size(); ++j) {
            const double t = tr[j].t;
            if (t < *eff.tau0)
                report.violations.push_back(
                    {Assumption::observation_window, tr.subject_id(), j + 1, t, *eff.tau0});
            else if (t > *eff.tau)
                report.violations.push_back(
                    {Assumption::observation_window, tr.subject_id(), j + 1, t, *eff.tau});
            if (j >= 1) {
                const double gap = t - tr[j - 1].t;
                if (gap < *eff.alpha)
                    report.violations.push_back(
                        {Assumption::alpha_separation, tr.subject_id(), j + 1, gap, *eff.alpha});
            }
        }
    }
    return report;
}

inline double observed_fraction(const PanelDataset& dataset)
{
    const std::size_t total = dataset.interval_count();
    if (total == 0) throw data_error("observed_fraction: empty dataset");
    return static_cast<double>(dataset.observed_count()) / static_cast<double>(total);
}

}  // namespace pcem

#endif  // PCEM_PANEL_HPP
