#ifndef PCEM_BOOTSTRAP_HPP
#define PCEM_BOOTSTRAP_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <future>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcem/em.hpp"
#include "pcem/error.hpp"
#include "pcem/numfmt.hpp"
#include "pcem/panel.hpp"
#include "pcem/panel_csv.hpp"
#include "pcem/rng.hpp"

namespace pcem {

struct BootstrapOptions
{
    std::size_t replicates = 1000;
    double level = 0.95;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::optional<double> jitter;        // per-replicate time perturbation amplitude
    double max_failure_fraction = 0.10;
};

struct BootstrapBand
{
    std::vector<double> grid;
    std::vector<double> mean;
    std::vector<double> lower;
    std::vector<double> upper;
    std::size_t replicates = 0;  // successful replicates
    std::size_t failed = 0;
    double level = 0.95;
    std::vector<std::string> failures;
};

// Nearest-rank quantile of sorted values: the ceil(p * R)-th smallest.
inline double nearest_rank(std::span<const double> sorted, double p)
{
    if (sorted.empty()) throw std::invalid_argument("nearest_rank: no values");
    const auto r = static_cast<std::size_t>(std::ceil(p * static_cast<double>(sorted.size())));
    const std::size_t idx = r == 0 ? 0 : std::min(r, sorted.size()) - 1;
    return sorted[idx];
}

// Subjects drawn with replacement, n of them; replicate b uses stream (seed, b).
inline PanelDataset resample_subjects(const PanelDataset& dataset, std::uint64_t seed, std::uint64_t replicate)
{
    Rng rng = make_stream(seed, replicate);
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    std::vector<Trajectory> out;
    out.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) out.push_back(dataset[pick(rng)]);
    return PanelDataset(std::move(out), dataset.design());
}

// Percentile band from B subject-level bootstrap refits, evaluated on grid.
inline BootstrapBand bootstrap_fit(const PanelDataset& dataset, const EmConfig& config, std::span<const double> grid,
                                   const BootstrapOptions& opts)
{
    if (opts.replicates == 0) throw std::invalid_argument("bootstrap_fit: need at least one replicate");
    if (!(opts.level > 0.0 && opts.level < 1.0)) throw std::invalid_argument("bootstrap_fit: level must be in (0, 1)");
    if (grid.empty()) throw std::invalid_argument("bootstrap_fit: empty grid");
    if (dataset.empty()) throw data_error("bootstrap_fit: empty dataset");
    const double tau = dataset.window_end();
    for (std::size_t g = 0; g < grid.size(); ++g) {
        if (!(grid[g] >= 0.0 && grid[g] <= tau))
            throw std::invalid_argument("bootstrap_fit: grid point " + format_double(grid[g]) + " outside [0, " +
                                        format_double(tau) + "]");
        if (g > 0 && grid[g] < grid[g - 1]) throw std::invalid_argument("bootstrap_fit: grid must be sorted");
    }

    const std::size_t B = opts.replicates;
    std::vector<std::optional<std::vector<double>>> curves(B);
    std::vector<std::string> errors(B);
    auto run = [&](std::size_t b) {
        try {
            PanelDataset ds = resample_subjects(dataset, opts.seed, b);
            const std::uint64_t rep_seed = derive_seed(opts.seed, b);
            if (opts.jitter) ds = jitter_times(ds, *opts.jitter, derive_seed(rep_seed, 1));
            EmConfig cfg = config;
            cfg.rng_seed = derive_seed(rep_seed, 2);
            const EmResult r = em_fit(ds, cfg);
            std::vector<double> curve(grid.size());
            for (std::size_t g = 0; g < grid.size(); ++g) curve[g] = r.estimate.eval(grid[g]);
            curves[b] = std::move(curve);
        } catch (const std::exception& e) {
            errors[b] = e.what();
        }
    };
    if (opts.threads <= 1) {
        for (std::size_t b = 0; b < B; ++b) run(b);
    } else {
        for (std::size_t first = 0; first < B; first += opts.threads) {
            std::vector<std::future<void>> batch;
            for (std::size_t b = first; b < std::min(B, first + opts.threads); ++b)
                batch.push_back(std::async(std::launch::async, run, b));
            for (auto& f : batch) f.get();
        }
    }

    BootstrapBand band;
    band.grid.assign(grid.begin(), grid.end());
    band.level = opts.level;
    for (std::size_t b = 0; b < B; ++b) {
        if (curves[b]) {
            ++band.replicates;
        } else {
            ++band.failed;
            band.failures.push_back("replicate " + std::to_string(b) + ": " + errors[b]);
        }
    }
    if (static_cast<double>(band.failed) > opts.max_failure_fraction * static_cast<double>(B) || band.replicates == 0)
        throw numerical_error("bootstrap_fit: " + std::to_string(band.failed) + " of " + std::to_string(B) +
                              " replicates failed" + (band.failures.empty() ? "" : "; first: " + band.failures.front()));

    const double p_lo = (1.0 - opts.level) / 2.0;
    const double p_hi = 1.0 - p_lo;
    std::vector<double> column;
    column.reserve(band.replicates);
    for (std::size_t g = 0; g < grid.size(); ++g) {
        column.clear();
        double sum = 0.0;
        for (std::size_t b = 0; b < B; ++b)
            if (curves[b]) {
                column.push_back((*curves[b])[g]);
                sum += (*curves[b])[g];
            }
        std::sort(column.begin(), column.end());
        const double m = sum / static_cast<double>(column.size());
        // Nearest-rank quantiles can miss the mean for skewed samples; the band is widened to contain it.
        band.mean.push_back(m);
        band.lower.push_back(std::min(nearest_rank(column, p_lo), m));
        band.upper.push_back(std::max(nearest_rank(column, p_hi), m));
    }
    return band;
}

inline void write_band_csv(std::ostream& out, const BootstrapBand& band)
{
    out << "t,mean,lower,upper\n";
    for (std::size_t g = 0; g < band.grid.size(); ++g)
        out << format_double(band.grid[g]) << ',' << format_double(band.mean[g]) << ','
            << format_double(band.lower[g]) << ',' << format_double(band.upper[g]) << '\n';
}

inline void to_json(nlohmann::json& j, const BootstrapBand& band)
{
    j = nlohmann::json{{"grid", band.grid},   {"mean", band.mean},          {"lower", band.lower},
                       {"upper", band.upper}, {"replicates", band.replicates}, {"failed", band.failed},
                       {"level", band.level}, {"failures", band.failures}};
}

}  // namespace pcem

#endif  // PCEM_BOOTSTRAP_HPP
