#ifndef PCEM_EM_HPP
#define PCEM_EM_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <future>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "pcem/error.hpp"
#include "pcem/mstep.hpp"
#include "pcem/numfmt.hpp"
#include "pcem/panel.hpp"
#include "pcem/rng.hpp"
#include "pcem/stepfn.hpp"

namespace pcem {

enum class MStepKind { pseudo, mle };

inline const char* to_string(MStepKind k) { return k == MStepKind::pseudo ? "pseudo" : "mle"; }

// Missing counts replaced by independent Poisson(mean) draws, then one M-step.
struct PoissonFill
{
    double mean = 1.0;
};
// Missing counts replaced by zero, then one M-step.
struct ZeroFill
{
};
struct UserInit
{
    StepFunction fn;
};
using InitKind = std::variant<PoissonFill, ZeroFill, UserInit>;

inline std::string describe(const InitKind& init)
{
    if (const auto* p = std::get_if<PoissonFill>(&init)) return "poisson:" + format_double(p->mean);
    if (std::holds_alternative<ZeroFill>(init)) return "zero";
    return "user";
}

struct EmConfig
{
    MStepKind mstep = MStepKind::mle;
    InitKind init = PoissonFill{1.0};
    double tol = 1e-7;
    std::size_t max_iter = 500;
    std::uint64_t rng_seed = 0;
    MleOptions inner;  // inner.cap also bounds the pseudo M-step
};

struct StartDiagnostic
{
    std::size_t index = 0;
    bool ok = false;
    std::string error;
    std::string init;
    double final_loglik = -std::numeric_limits<double>::infinity();
    std::size_t iterations = 0;
    bool converged = false;
};

struct EmResult
{
    StepFunction estimate;
    StepFunction initial;
    std::size_t iterations = 0;
    std::vector<double> q_trace;       // Q(next | current) per iteration
    std::vector<double> loglik_trace;  // observed-data log-likelihood, starting at the initial fit
    bool converged = false;
    bool degenerate_init = false;
    std::size_t boundary_escapes = 0;  // restarts from absorbing zero jumps
    std::string status;
    std::vector<std::string> warnings;
    std::size_t selected_start = 0;
    std::vector<StartDiagnostic> starts;
};

// Imputed increments below this fraction of the current total are treated as
// zero: they sit at the resolution of the cumulative representation, where a
// difference of cumulative values is rounding noise.
inline constexpr double imputation_resolution = 1e-10;

// Weights for the complete-data objective: observed counts, and the current
// estimate's increment wherever a count is missing.
inline WeightedIntervals e_step(const PanelDataset& dataset, const StepFunction& current)
{
    const double floor =
        current.cum_values().empty() ? 0.0 : imputation_resolution * current.cum_values().back();
    return filled_weights(dataset, [&](std::size_t i, std::size_t j) {
        const auto& iv = dataset[i][j];
        const double inc = current.increment(iv.t_prev, iv.t);
        return inc < floor ? 0.0 : inc;
    });
}

// Empirical Q-function: (1/n) sum_ij w_ij log dcand_ij - (1/n) sum_i cand(T_iK),
// weights from e_step(dataset, conditioning). Returns -inf when a positive
// weight meets a zero candidate increment.
template <class Candidate>
double q_value(const PanelDataset& dataset, const Candidate& candidate, const StepFunction& conditioning)
{
    if (dataset.empty()) throw std::invalid_argument("q_value: empty dataset");
    const WeightedIntervals w = e_step(dataset, conditioning);
    double total = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& tr = dataset[i];
        for (std::size_t j = 0; j < tr.size(); ++j) {
            const double wij = w.subjects[i][j].weight;
            if (wij == 0.0) continue;
            const double inc = candidate(tr[j].t) - candidate(tr[j].t_prev);
            if (!(inc > 0.0)) return -std::numeric_limits<double>::infinity();
            total += wij * std::log(inc);
        }
        total -= candidate(tr.last_time());
    }
    return total / static_cast<double>(dataset.size());
}

// Right derivative of q_value at base in the given direction:
// (1/n) sum_ij (w_ij / dbase_ij - 1) * ddirection_ij.
template <class Direction>
double gateaux_derivative(const PanelDataset& dataset, const StepFunction& base, const Direction& direction,
                          const StepFunction& conditioning)
{
    if (dataset.empty()) throw std::invalid_argument("gateaux_derivative: empty dataset");
    const WeightedIntervals w = e_step(dataset, conditioning);
    double total = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& tr = dataset[i];
        for (std::size_t j = 0; j < tr.size(); ++j) {
            const auto& iv = tr[j];
            const double db = base.increment(iv.t_prev, iv.t);
            if (!(db > 0.0))
                throw std::invalid_argument("gateaux_derivative: zero base increment for subject " +
                                            tr.subject_id() + ", interval " + std::to_string(j + 1));
            const double dd = direction(iv.t) - direction(iv.t_prev);
            total += (w.subjects[i][j].weight / db - 1.0) * dd;
        }
    }
    return total / static_cast<double>(dataset.size());
}

// Sum over intervals with a reported count of [dN log df - df]; -inf when a
// positive count meets a zero increment.
inline double observed_loglik(const PanelDataset& dataset, const StepFunction& f)
{
    double total = 0.0;
    for (const auto& tr : dataset.trajectories())
        for (const auto& iv : tr.intervals()) {
            if (iv.missing()) continue;
            total += detail::loglik_term(*iv.count, f.increment(iv.t_prev, iv.t));
        }
    return total;
}

namespace detail {

struct MStepOutcome
{
    StepFunction fn;
    std::optional<std::string> warning;
};

inline MStepOutcome run_m_step(const WeightedIntervals& w, const EmConfig& config,
                               const StepFunction* warm_start = nullptr)
{
    if (config.mstep == MStepKind::pseudo) {
        PseudoFit p = fit_pseudo(w, config.inner.cap);
        MStepOutcome out{std::move(p.fn), std::nullopt};
        if (p.degenerate) out.warning = "pseudo M-step: all cumulative weights zero";
        return out;
    }
    MleOptions opt = config.inner;
    if (warm_start) opt.start = *warm_start;
    MleFit fit = fit_mle(w, opt);
    MStepOutcome out{std::move(fit.fn), std::nullopt};
    if (!fit.converged) out.warning = "mle M-step " + fit.status + " (kkt residual " + format_double(fit.kkt_residual) + ")";
    return out;
}

inline void validate_config(const EmConfig& config)
{
    if (!(config.tol > 0.0)) throw std::invalid_argument("EmConfig: tol must be > 0");
    if (const auto* p = std::get_if<PoissonFill>(&config.init))
        if (!(p->mean >= 0.0) || !std::isfinite(p->mean))
            throw std::invalid_argument("EmConfig: poisson fill mean must be finite and >= 0");
}

inline void add_warning(EmResult& r, const std::optional<std::string>& w)
{
    if (!w) return;
    for (const auto& e : r.warnings)
        if (e == *w) return;
    r.warnings.push_back(*w);
}

inline constexpr double escape_gradient = 1e-7;
inline constexpr double negligible_jump = 1e-4;  // relative to the typical observed increment
inline constexpr std::size_t max_escapes = 100;

// A jump at zero is absorbing for the EM map: a missing interval covering
// only zero jumps imputes zero weight, and its -dLambda term holds those
// jumps at zero even when the observed intervals pull them up. Negligible
// jumps leave it only geometrically slowly. Returns a point with strictly
// higher observed log-likelihood if such a jump exists.
inline std::optional<StepFunction> boundary_escape(const PanelDataset& dataset, const StepFunction& current,
                                                   std::optional<double> cap)
{
    const WeightedIntervals ow = observed_weights(dataset);
    const KktReport kkt = mle_kkt(ow, current);
    const JumpGrid grid = JumpGrid::build(ow);
    const auto& cov = grid.coverage();
    const std::size_t m = kkt.grid.size();

    double d_sum = 0.0, d_count = 0.0;
    for (const auto& tr : dataset.trajectories())
        for (const auto& iv : tr.intervals())
            if (!iv.missing()) {
                d_sum += current.increment(iv.t_prev, iv.t);
                d_count += 1.0;
            }
    const double typical = d_count > 0.0 && d_sum > 0.0 ? d_sum / d_count : 1.0;

    std::vector<double> dir(m, 0.0);
    bool any = false;
    for (std::size_t g = 0; g < m; ++g) {
        const double grad = kkt.gradient[g];
        if (kkt.jumps[g] <= negligible_jump * typical && std::isfinite(grad) && grad > escape_gradient && cov[g] > 0.0) {
            dir[g] = typical * grad / cov[g];
            any = true;
        }
    }
    if (!any) return std::nullopt;

    const double base = observed_loglik(dataset, current);
    std::vector<double> jumps(m);
    for (double t = 1.0; t > 1e-12; t *= 0.5) {
        for (std::size_t g = 0; g < m; ++g) jumps[g] = kkt.jumps[g] + t * dir[g];
        StepFunction next = finish_step_function(kkt.grid, jumps, cap);
        if (observed_loglik(dataset, next) > base) return next;
    }
    return std::nullopt;
}

// EM run whose initialization draws from stream (config.rng_seed, stream).
inline EmResult em_fit_stream(const PanelDataset& dataset, const EmConfig& config, std::uint64_t stream)
{
    validate_config(config);
    if (dataset.empty()) throw data_error("em_fit: empty dataset");
    if (dataset.observed_count() == 0) throw data_error("em_fit: no observed intervals");

    EmResult r;
    if (const auto* u = std::get_if<UserInit>(&config.init)) {
        r.initial = u->fn;
    } else {
        const double fill_mean = std::holds_alternative<PoissonFill>(config.init)
                                     ? std::get<PoissonFill>(config.init).mean
                                     : 0.0;
        Rng rng = make_stream(config.rng_seed, stream);
        const WeightedIntervals filled =
            filled_weights(dataset, [&](std::size_t, std::size_t) { return draw_poisson(rng, fill_mean); });
        MStepOutcome init = run_m_step(filled, config);
        add_warning(r, init.warning);
        r.initial = std::move(init.fn);
    }

    const double tau = dataset.window_end();
    r.degenerate_init = dataset.has_missing() && r.initial.eval(tau) == 0.0;
    if (r.degenerate_init)
        r.warnings.push_back("degenerate initialization: zero initial estimate with missing counts");

    StepFunction current = r.initial;
    r.loglik_trace.push_back(observed_loglik(dataset, current));
    r.status = "max_iter";
    for (std::size_t it = 1; it <= config.max_iter; ++it) {
        MStepOutcome step = run_m_step(e_step(dataset, current), config, &current);
        add_warning(r, step.warning);
        r.q_trace.push_back(q_value(dataset, step.fn, current));
        r.loglik_trace.push_back(observed_loglik(dataset, step.fn));
        const double moved = sup_distance(step.fn, current, 0.0, tau);
        current = std::move(step.fn);
        r.iterations = it;
        if (moved < config.tol) {
            if (config.mstep == MStepKind::mle && r.boundary_escapes < max_escapes) {
                if (auto next = boundary_escape(dataset, current, config.inner.cap)) {
                    current = std::move(*next);
                    ++r.boundary_escapes;
                    continue;
                }
            }
            r.converged = true;
            r.status = "converged";
            break;
        }
    }
    r.estimate = std::move(current);
    return r;
}

}  // namespace detail

// Functional EM: alternate E-step imputation of missing increments with an
// M-step over monotone step functions until successive iterates are within
// tol in sup-distance over [0, tau].
inline EmResult em_fit(const PanelDataset& dataset, const EmConfig& config)
{
    return detail::em_fit_stream(dataset, config, 0);
}

// Runs one EM per config (start k draws from stream (seed_k, k)) and keeps
// the highest final observed log-likelihood; ties go to the lowest index.
inline EmResult multi_start(const PanelDataset& dataset, const std::vector<EmConfig>& configs,
                            std::size_t threads = 1)
{
    if (configs.empty()) throw std::invalid_argument("multi_start: no configurations");
    for (const auto& c : configs) detail::validate_config(c);

    std::vector<std::optional<EmResult>> results(configs.size());
    std::vector<StartDiagnostic> diags(configs.size());
    auto run_one = [&](std::size_t k) {
        diags[k].index = k;
        diags[k].init = describe(configs[k].init);
        try {
            EmResult r = detail::em_fit_stream(dataset, configs[k], k);
            diags[k].ok = true;
            diags[k].final_loglik = r.loglik_trace.back();
            diags[k].iterations = r.iterations;
            diags[k].converged = r.converged;
            results[k] = std::move(r);
        } catch (const data_error&) {
            throw;
        } catch (const std::exception& e) {
            diags[k].error = e.what();
        }
    };
    if (threads <= 1 || configs.size() == 1) {
        for (std::size_t k = 0; k < configs.size(); ++k) run_one(k);
    } else {
        for (std::size_t first = 0; first < configs.size(); first += threads) {
            std::vector<std::future<void>> batch;
            for (std::size_t k = first; k < std::min(configs.size(), first + threads); ++k)
                batch.push_back(std::async(std::launch::async, run_one, k));
            for (auto& f : batch) f.get();
        }
    }

    std::optional<std::size_t> best;
    for (std::size_t k = 0; k < configs.size(); ++k) {
        if (!results[k]) continue;
        if (!best || diags[k].final_loglik > diags[*best].final_loglik) best = k;
    }
    if (!best) {
        std::string msg = "multi_start: every start failed";
        for (const auto& d : diags) msg += "; start " + std::to_string(d.index) + ": " + d.error;
        throw numerical_error(msg);
    }
    EmResult out = std::move(*results[*best]);
    out.selected_start = *best;
    out.starts = std::move(diags);
    return out;
}

namespace detail {

inline nlohmann::json finite_or_string(double v)
{
    if (std::isfinite(v)) return v;
    return format_double(v);
}

inline nlohmann::json trace_json(const std::vector<double>& xs)
{
    nlohmann::json a = nlohmann::json::array();
    for (double v : xs) a.push_back(finite_or_string(v));
    return a;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const StartDiagnostic& d)
{
    j = nlohmann::json{{"index", d.index},
                       {"ok", d.ok},
                       {"init", d.init},
                       {"final_loglik", detail::finite_or_string(d.final_loglik)},
                       {"iterations", d.iterations},
                       {"converged", d.converged}};
    if (!d.error.empty()) j["error"] = d.error;
}

inline void to_json(nlohmann::json& j, const EmResult& r)
{
    j = nlohmann::json{{"estimate", r.estimate},
                       {"initial", r.initial},
                       {"iterations", r.iterations},
                       {"converged", r.converged},
                       {"status", r.status},
                       {"degenerate_init", r.degenerate_init},
                       {"boundary_escapes", r.boundary_escapes},
                       {"warnings", r.warnings},
                       {"q_trace", detail::trace_json(r.q_trace)},
                       {"loglik_trace", detail::trace_json(r.loglik_trace)},
                       {"selected_start", r.selected_start},
                       {"starts", r.starts}};
}

}  // namespace pcem

#endif  // PCEM_EM_HPP
