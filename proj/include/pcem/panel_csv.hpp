#ifndef PCEM_PANEL_CSV_HPP
#define PCEM_PANEL_CSV_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pcem/error.hpp"
#include "pcem/numfmt.hpp"
#include "pcem/panel.hpp"
#include "pcem/rng.hpp"

namespace pcem {

inline constexpr const char* panel_csv_header = "subject,t_prev,t,count";

struct IngestOptions
{
    bool allow_fractional = false;
    // Ties in observation times are kept as-is unless a jitter amplitude is set.
    std::optional<double> jitter;
    std::uint64_t jitter_seed = 0;
};

// Perturbs every observation time T_j by an independent uniform draw in
// [-amplitude, amplitude], keeping intervals contiguous. Subject i draws from
// stream (seed, i).
inline PanelDataset jitter_times(const PanelDataset& dataset, double amplitude, std::uint64_t seed)
{
    if (!(amplitude >= 0.0)) throw std::invalid_argument("jitter amplitude must be >= 0");
    std::vector<Trajectory> out;
    out.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        Rng rng = make_stream(seed, i);
        const auto& tr = dataset[i];
        std::vector<IntervalObservation> ivs(tr.intervals().begin(), tr.intervals().end());
        double prev = 0.0;
        for (auto& iv : ivs) {
            iv.t_prev = prev;
            iv.t = iv.t + draw_uniform(rng, -amplitude, amplitude);
            if (!(iv.t > iv.t_prev))
                throw data_error("subject " + tr.subject_id() +
                                 ": jitter would reorder observation times");
            prev = iv.t;
        }
        out.emplace_back(tr.subject_id(), std::move(ivs));
    }
    return PanelDataset(std::move(out), dataset.design());
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline bool is_blank(const std::string& s)
{
    return s.find_first_not_of(" \t\r") == std::string::npos;
}

}  // namespace detail

// Reads `subject,t_prev,t,count` rows. Rows of one subject must be adjacent
// and ordered in time; an empty count field marks a missing increment.
inline PanelDataset read_panel_csv(std::istream& in, const IngestOptions& opts = {},
                                   StudyDesign design = {})
{
    std::string line;
    if (!std::getline(in, line)) throw data_error("panel csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != panel_csv_header)
        throw data_error("panel csv: header must be exactly '" + std::string(panel_csv_header) +
                         "', got '" + line + "'");

    std::vector<Trajectory> trajectories;
    std::set<std::string> finished;
    std::string current_id;
    std::vector<IntervalObservation> current;
    std::size_t lineno = 1;

    auto flush = [&]() {
        if (current.empty()) return;
        trajectories.emplace_back(current_id, std::move(current));
        finished.insert(current_id);
        current.clear();
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (detail::is_blank(line)) continue;
        const auto fields = detail::split_csv_line(line);
        const std::string where = "panel csv line " + std::to_string(lineno);
        if (fields.size() != 4) throw data_error(where + ": expected 4 fields");
        const std::string& id = fields[0];
        if (id.empty()) throw data_error(where + ": empty subject id");
        auto t_prev = parse_double(fields[1]);
        auto t = parse_double(fields[2]);
        if (!t_prev || !t) throw data_error(where + ": malformed time");
        IntervalObservation iv{*t_prev, *t, std::nullopt};
        if (!detail::is_blank(fields[3])) {
            auto c = parse_double(fields[3]);
            if (!c) throw data_error(where + ": malformed count '" + fields[3] + "'");
            if (*c < 0.0) throw data_error(where + ": negative count");
            if (!opts.allow_fractional && std::floor(*c) != *c)
                throw data_error(where + ": non-integer count (fractional counts not allowed)");
            iv.count = *c;
        }
        if (id != current_id) {
            flush();
            if (finished.count(id))
                throw data_error(where + ": rows for subject " + id + " are not adjacent");
            current_id = id;
        }
        if (current.empty() ? iv.t_prev != 0.0 : iv.t_prev != current.back().t)
            throw data_error(where + ": non-contiguous interval for subject " + id);
        current.push_back(iv);
    }
    flush();

    PanelDataset ds(std::move(trajectories), design);
    if (opts.jitter) ds = jitter_times(ds, *opts.jitter, opts.jitter_seed);
    return ds;
}

inline PanelDataset read_panel_csv(const std::string& path, const IngestOptions& opts = {},
                                   StudyDesign design = {})
{
    std::ifstream in(path);
    if (!in) throw data_error("cannot open " + path);
    return read_panel_csv(in, opts, design);
}

inline void write_panel_csv(std::ostream& out, const PanelDataset& dataset)
{
    out << panel_csv_header << '\n';
    for (const auto& tr : dataset.trajectories()) {
        for (const auto& iv : tr.intervals()) {
            out << tr.subject_id() << ',' << format_double(iv.t_prev) << ',' << format_double(iv.t)
                << ',';
            if (iv.count) out << format_double(*iv.count);
            out << '\n';
        }
    }
}

inline std::string to_panel_csv(const PanelDataset& dataset)
{
    std::ostringstream os;
    write_panel_csv(os, dataset);
    return os.str();
}

}  // namespace pcem

#endif  // PCEM_PANEL_CSV_HPP
