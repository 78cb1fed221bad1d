#ifndef PCEM_CLI_HPP
#define PCEM_CLI_HPP

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcem/bootstrap.hpp"
#include "pcem/em.hpp"
#include "pcem/error.hpp"
#include "pcem/metrics.hpp"
#include "pcem/numfmt.hpp"
#include "pcem/panel.hpp"
#include "pcem/panel_csv.hpp"
#include "pcem/plot.hpp"
#include "pcem/simulate.hpp"

#ifndef PCEM_VERSION
#define PCEM_VERSION "1.0.0"
#endif

namespace pcem::cli {

enum ExitCode : int { ok = 0, usage = 2, data_failure = 3, numerical_failure = 4 };

class usage_error : public std::invalid_argument
{
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// 64-bit FNV-1a, used to pin manifest inputs.
inline std::string fingerprint(const std::string& bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int k = 15; k >= 0; --k, h >>= 4) out[static_cast<std::size_t>(k)] = hex[h & 0xF];
    return out;
}

// Collects the files a command writes into its output directory.
class OutputDir
{
public:
    explicit OutputDir(std::string dir) : dir_(std::move(dir))
    {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw data_error("cannot create output directory " + dir_ + ": " + ec.message());
    }

    void write(const std::string& name, const std::string& content)
    {
        const fs::path p = fs::path(dir_) / name;
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw data_error("cannot write " + p.string());
        out << content;
        if (!out) throw data_error("write failed: " + p.string());
        artifacts_.push_back(name);
    }

    const std::vector<std::string>& artifacts() const { return artifacts_; }

private:
    std::string dir_;
    std::vector<std::string> artifacts_;
};

struct Invocation
{
    std::string command;
    std::vector<std::string> args;  // arguments after the subcommand, --out removed
    std::string out;
};

// Manifest: everything needed to repeat the run except the output
// directory, so reruns into another directory reproduce it byte for byte.
inline std::string manifest_text(const Invocation& inv, std::uint64_t seed, const json& parameters,
                                 const std::vector<std::string>& artifacts,
                                 const std::vector<std::pair<std::string, std::string>>& inputs)
{
    json m;
    m["tool"] = "pcem";
    m["version"] = PCEM_VERSION;
    m["command"] = inv.command;
    m["args"] = inv.args;
    m["seed"] = seed;
    m["parameters"] = parameters;
    m["artifacts"] = artifacts;
    json in = json::array();
    for (const auto& [path, fp] : inputs) in.push_back({{"path", path}, {"fnv1a64", fp}});
    m["inputs"] = in;
    return m.dump(2) + "\n";
}

inline std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double number(const std::string& s, const std::string& what)
{
    auto v = parse_double(s);
    if (!v) throw usage_error("malformed number '" + s + "' in " + what);
    return *v;
}

// "t:v,t:v,..." nodes of a piecewise-linear mean table.
inline std::vector<std::pair<double, double>> parse_table(const std::string& s)
{
    std::vector<std::pair<double, double>> nodes;
    for (const auto& item : split(s, ',')) {
        const auto tv = split(item, ':');
        if (tv.size() != 2) throw usage_error("table nodes must look like t:v, got '" + item + "'");
        nodes.emplace_back(number(tv[0], "--table"), number(tv[1], "--table"));
    }
    return nodes;
}

inline MeanFunctionSpec parse_mean(const std::string& kind, const std::string& table)
{
    MeanFunctionSpec m;
    if (kind == "sqrt") m.kind = MeanKind::sqrt;
    else if (kind == "square") m.kind = MeanKind::square;
    else if (kind == "linear") m.kind = MeanKind::linear;
    else if (kind == "table") {
        m.kind = MeanKind::table;
        if (table.empty()) throw usage_error("--mean table needs --table t:v,...");
        m.table = parse_table(table);
    } else {
        throw usage_error("unknown mean function '" + kind + "'");
    }
    return m;
}

// "sqrt", "square", "linear" or "table:t:v,t:v".
inline MeanFunctionSpec parse_truth(const std::string& s)
{
    if (s.rfind("table:", 0) == 0) return parse_mean("table", s.substr(6));
    return parse_mean(s, "");
}

inline InitKind parse_init(const std::string& s)
{
    if (s == "zero") return ZeroFill{};
    if (s.rfind("poisson:", 0) == 0) {
        const double mean = number(s.substr(8), "--init");
        if (!(mean >= 0.0)) throw usage_error("--init poisson mean must be >= 0");
        return PoissonFill{mean};
    }
    if (s == "poisson") return PoissonFill{1.0};
    throw usage_error("--init must be poisson:MEAN or zero, got '" + s + "'");
}

// "N" over the default window or "lo:hi:N".
inline std::vector<double> parse_grid(const std::string& s, double lo, double hi)
{
    const auto parts = split(s, ':');
    double count = 0.0;
    if (parts.size() == 1) {
        count = number(parts[0], "--grid");
    } else if (parts.size() == 3) {
        lo = number(parts[0], "--grid");
        hi = number(parts[1], "--grid");
        count = number(parts[2], "--grid");
    } else {
        throw usage_error("--grid must be N or lo:hi:N");
    }
    if (!(count >= 1.0) || count != std::floor(count)) throw usage_error("--grid point count must be a positive integer");
    if (!(lo <= hi) || lo < 0.0) throw usage_error("--grid needs 0 <= lo <= hi");
    return linspace(lo, hi, static_cast<std::size_t>(count));
}

inline json design_json(const StudyDesign& d)
{
    json j = json::object();
    if (d.tau0) j["tau0"] = *d.tau0;
    if (d.tau) j["tau"] = *d.tau;
    if (d.k0) j["k0"] = *d.k0;
    if (d.alpha) j["alpha"] = *d.alpha;
    return j;
}

inline json report_json(const ValidationReport& r)
{
    json v = json::array();
    for (const auto& x : r.violations)
        v.push_back({{"assumption", to_string(x.assumption)},
                     {"subject", x.subject_id},
                     {"interval", x.interval},
                     {"value", x.value},
                     {"bound", x.bound}});
    return {{"violations", v}, {"effective", design_json(r.effective)}, {"inferred", r.inferred}};
}

inline std::string grid_csv(const std::vector<double>& grid, const std::vector<std::string>& names,
                            const std::vector<const StepFunction*>& fns)
{
    std::ostringstream o;
    o << 't';
    for (const auto& n : names) o << ',' << n;
    o << '\n';
    for (double t : grid) {
        o << format_double(t);
        for (const auto* f : fns) o << ',' << format_double(f->eval(t));
        o << '\n';
    }
    return o.str();
}

inline const char* palette(std::size_t k)
{
    static const char* colors[] = {"#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"};
    return colors[k % 5];
}

// ---- simulate ----

struct SimulateArgs
{
    std::string mean = "sqrt";
    std::string table;
    bool no_frailty = false;
    std::size_t n = 100;
    std::size_t k = 30;
    double tau0 = 0.1;
    double tau = 10.0;
    double alpha = 0.0;
    double eps = 0.2;
    std::string missingness = "mcar";
    double eps_zero = 0.1;
    double eps_pos = 0.3;
    std::uint64_t seed = 0;
};

inline void add_simulate(CLI::App& app, SimulateArgs& a, std::string& out)
{
    app.add_option("--mean", a.mean, "true mean function")->check(CLI::IsMember({"sqrt", "square", "linear", "table"}));
    app.add_option("--table", a.table, "nodes t:v,... for --mean table (linear from the origin)");
    app.add_flag("--no-frailty", a.no_frailty, "plain Poisson increments instead of the uniform(0,2) frailty");
    app.add_option("--n", a.n, "subjects");
    app.add_option("--k", a.k, "observations per subject");
    app.add_option("--tau0", a.tau0, "window start");
    app.add_option("--tau", a.tau, "window end");
    app.add_option("--alpha", a.alpha, "minimum spacing of observation times");
    app.add_option("--eps", a.eps, "missingness rate (mcar) or mean rate (het)");
    app.add_option("--missingness", a.missingness, "missingness mechanism")->check(CLI::IsMember({"mcar", "het", "mar"}));
    app.add_option("--eps-zero", a.eps_zero, "mar rate after a zero count");
    app.add_option("--eps-pos", a.eps_pos, "mar rate after a positive count");
    app.add_option("--seed", a.seed, "random seed");
    app.add_option("--out", out, "output directory")->required();
}

inline int run_simulate(const SimulateArgs& a, const Invocation& inv, std::ostream& log)
{
    MeanFunctionSpec mean = parse_mean(a.mean, a.table);
    mean.tau0 = a.tau0;
    mean.tau = a.tau;
    mean.frailty = !a.no_frailty;
    const ScheduleSpec sched{a.k, a.tau0, a.tau, a.alpha};
    MissingnessSpec miss = Mcar{a.eps};
    if (a.missingness == "het") miss = Heterogeneous{a.eps};
    if (a.missingness == "mar") miss = Mar{a.eps_zero, a.eps_pos};
    mean.check();
    sched.check();
    check(miss);
    if (a.n == 0) throw usage_error("--n must be >= 1");

    const PanelDataset complete = sample_panel(mean, sched, a.n, derive_seed(a.seed, 0));
    const PanelDataset panel = corrupt(complete, miss, derive_seed(a.seed, 1));

    json params = {{"mean", a.mean},
                   {"frailty", mean.frailty},
                   {"n", a.n},
                   {"k", a.k},
                   {"tau0", a.tau0},
                   {"tau", a.tau},
                   {"alpha", a.alpha},
                   {"missingness", describe(miss)}};
    if (mean.kind == MeanKind::table) params["table"] = a.table;
    if (a.missingness == "mar") {
        params["eps_zero"] = a.eps_zero;
        params["eps_pos"] = a.eps_pos;
    } else {
        params["eps"] = a.eps;
    }
    params["observed_fraction"] = observed_fraction(panel);

    OutputDir out(inv.out);
    out.write("panel.csv", to_panel_csv(panel));
    out.write("complete.csv", to_panel_csv(complete));
    auto artifacts = out.artifacts();
    out.write("manifest.json", manifest_text(inv, a.seed, params, artifacts, {}));
    log << "simulated " << a.n << " subjects, observed fraction " << format_double(observed_fraction(panel)) << '\n';
    return ok;
}

// ---- fit ----

struct FitArgs
{
    std::string data;
    std::string mstep = "mle";
    std::vector<std::string> init{"poisson:1"};
    std::size_t boot = 0;
    double level = 0.95;
    std::string grid = "100";
    std::size_t starts = 1;
    std::uint64_t seed = 0;
    std::vector<std::string> baseline;
    double tol = 1e-7;
    std::size_t max_iter = 500;
    std::size_t threads = 1;
    bool allow_fractional = false;
    std::optional<double> jitter;
    std::optional<double> tau0, tau, alpha;
    std::optional<std::size_t> k0;
    std::string truth;
};

inline void add_fit(CLI::App& app, FitArgs& a, std::string& out)
{
    app.add_option("--data", a.data, "panel csv")->required();
    app.add_option("--mstep", a.mstep, "M-step solver")->check(CLI::IsMember({"pseudo", "mle"}));
    app.add_option("--init", a.init, "initialization poisson:MEAN or zero; repeat for several")->take_all();
    app.add_option("--boot", a.boot, "bootstrap replicates (0 = point estimate only)");
    app.add_option("--level", a.level, "band level");
    app.add_option("--grid", a.grid, "evaluation grid: N points over the window, or lo:hi:N");
    app.add_option("--starts", a.starts, "random starts per initialization");
    app.add_option("--seed", a.seed, "random seed");
    app.add_option("--baseline", a.baseline, "comparators to fit as well")
        ->check(CLI::IsMember({"zero-fill", "drop"}))
        ->take_all();
    app.add_option("--tol", a.tol, "EM tolerance on the sup-distance between iterates");
    app.add_option("--max-iter", a.max_iter, "EM iteration limit");
    app.add_option("--threads", a.threads, "worker threads for starts and bootstrap");
    app.add_flag("--allow-fractional", a.allow_fractional, "accept non-integer counts");
    app.add_option("--jitter", a.jitter, "perturb observation times by up to this amount");
    app.add_option("--tau0", a.tau0, "declared window start");
    app.add_option("--tau", a.tau, "declared window end");
    app.add_option("--k0", a.k0, "declared maximum observations per subject");
    app.add_option("--alpha", a.alpha, "declared minimum spacing");
    app.add_option("--truth", a.truth, "overlay a known mean: sqrt, square, linear or table:t:v,...");
    app.add_option("--out", out, "output directory")->required();
}

inline int run_fit(const FitArgs& a, const Invocation& inv, std::ostream& log)
{
    if (a.starts == 0) throw usage_error("--starts must be >= 1");
    if (a.init.empty()) throw usage_error("--init needs a value");
    if (!(a.level > 0.0 && a.level < 1.0)) throw usage_error("--level must be in (0, 1)");
    if (!(a.tol > 0.0)) throw usage_error("--tol must be > 0");
    std::vector<InitKind> inits;
    for (const auto& s : a.init) inits.push_back(parse_init(s));
    std::optional<MeanFunctionSpec> truth;
    if (!a.truth.empty()) truth = parse_truth(a.truth);

    const std::string raw = read_file(a.data);
    IngestOptions ingest{a.allow_fractional, a.jitter, derive_seed(a.seed, 7)};
    std::istringstream in(raw);
    const StudyDesign declared{a.tau0, a.tau, a.k0, a.alpha};
    const PanelDataset ds = read_panel_csv(in, ingest, declared);
    if (ds.empty()) throw data_error("no subjects in " + a.data);
    const ValidationReport rep = validate(ds);
    if (!rep.ok()) {
        std::ostringstream msg;
        msg << rep.violations.size() << " assumption violation(s), first: subject " << rep.violations[0].subject_id
            << " interval " << rep.violations[0].interval << " " << to_string(rep.violations[0].assumption) << " (value "
            << format_double(rep.violations[0].value) << ", bound " << format_double(rep.violations[0].bound) << ")";
        throw data_error(msg.str());
    }
    const PanelDataset data = ds.with_design(rep.effective);
    const double lo = *rep.effective.tau0, hi = *rep.effective.tau;
    const std::vector<double> grid = parse_grid(a.grid, lo, hi);
    if (grid.back() > hi) throw usage_error("--grid extends past the window end " + format_double(hi));

    std::vector<EmConfig> configs;
    for (const auto& init : inits)
        for (std::size_t s = 0; s < a.starts; ++s) {
            EmConfig c;
            c.mstep = a.mstep == "pseudo" ? MStepKind::pseudo : MStepKind::mle;
            c.init = init;
            c.tol = a.tol;
            c.max_iter = a.max_iter;
            c.rng_seed = a.seed;
            configs.push_back(c);
        }
    const EmResult em = multi_start(data, configs, a.threads);
    if (!std::isfinite(em.loglik_trace.back()))
        throw numerical_error("fitted estimate gives a non-finite observed log-likelihood");
    if (!em.converged) log << "warning: EM stopped at max_iter without converging\n";

    json result;
    result["em"] = em;
    result["validation"] = report_json(rep);
    result["grid"] = grid;

    std::vector<std::string> names{"estimate"};
    std::vector<const StepFunction*> fns{&em.estimate};
    std::vector<std::pair<std::string, StepFunction>> baselines;
    for (const auto& b : a.baseline) {
        if (std::any_of(baselines.begin(), baselines.end(), [&](const auto& x) { return x.first == b; })) continue;
        if (b == "zero-fill") {
            EmConfig c = configs[em.selected_start];
            const auto filled = observed_weights(zero_fill_baseline(data));
            StepFunction f = c.mstep == MStepKind::pseudo ? fit_pseudo(filled, c.inner.cap).fn : fit_mle(filled, c.inner).fn;
            baselines.emplace_back(b, std::move(f));
        } else {
            baselines.emplace_back(b, fit_drop_missing(data).fn);
        }
    }
    json bj = json::object();
    for (const auto& [name, f] : baselines) {
        bj[name] = f;
        names.push_back(name);
        fns.push_back(&f);
    }
    result["baselines"] = bj;

    std::optional<BootstrapBand> band;
    if (a.boot > 0) {
        BootstrapOptions bo;
        bo.replicates = a.boot;
        bo.level = a.level;
        bo.seed = derive_seed(a.seed, 2);
        bo.threads = a.threads;
        band = bootstrap_fit(data, configs[em.selected_start], grid, bo);
        result["band"] = *band;
    }

    PlotSpec plot;
    plot.title = "Estimated mean function";
    plot.x_lo = grid.front();
    plot.x_hi = grid.back() > grid.front() ? grid.back() : grid.front() + 1.0;
    plot.band = band;
    if (band) plot.curves.push_back(sampled_curve(
        [&](double t) {
            const auto it = std::lower_bound(band->grid.begin(), band->grid.end(), t);
            const auto k = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - band->grid.begin(), static_cast<std::ptrdiff_t>(band->grid.size()) - 1));
            return band->mean[k];
        },
        band->grid.front(), plot.x_hi, band->grid.size(), "bootstrap mean", "#1f77b4"));
    plot.curves.push_back(step_curve(em.estimate, plot.x_lo, plot.x_hi, "EM estimate", "#000000"));
    for (std::size_t k = 0; k < baselines.size(); ++k)
        plot.curves.push_back(step_curve(baselines[k].second, plot.x_lo, plot.x_hi, baselines[k].first, palette(k)));
    if (truth) plot.curves.push_back(sampled_curve(*truth, plot.x_lo, plot.x_hi, 200, "truth", "#7f7f7f"));
    if (band) plot.curves.front().dashed = false;

    json params = {{"data", a.data},
                   {"mstep", a.mstep},
                   {"init", a.init},
                   {"starts", a.starts},
                   {"boot", a.boot},
                   {"level", a.level},
                   {"grid", a.grid},
                   {"tol", a.tol},
                   {"max_iter", a.max_iter},
                   {"baseline", a.baseline},
                   {"design", design_json(rep.effective)}};
    if (a.jitter) params["jitter"] = *a.jitter;

    OutputDir out(inv.out);
    out.write("result.json", result.dump(2) + "\n");
    out.write("estimate.csv", grid_csv(grid, names, fns));
    if (band) {
        std::ostringstream bcsv;
        write_band_csv(bcsv, *band);
        out.write("band.csv", bcsv.str());
    }
    out.write("plot.svg", render_svg(plot));
    auto artifacts = out.artifacts();
    out.write("manifest.json", manifest_text(inv, a.seed, params, artifacts, {{a.data, fingerprint(raw)}}));
    log << "EM " << em.status << " after " << em.iterations << " iterations, observed log-likelihood "
        << format_double(em.loglik_trace.back()) << '\n';
    return ok;
}

// ---- report ----

struct ReportArgs
{
    std::vector<std::string> estimates;
    std::string truth;
    std::string reference;
    std::string data;
    std::string grid = "50";
    std::string constants;
};

inline void add_report(CLI::App& app, ReportArgs& a, std::string& out)
{
    app.add_option("--estimate", a.estimates, "fitted result or step function json, optionally NAME=PATH")->take_all();
    app.add_option("--truth", a.truth, "known mean: sqrt, square, linear or table:t:v,...");
    app.add_option("--reference", a.reference, "reference fit to compare against");
    app.add_option("--data", a.data, "panel csv defining the d2 pair measure and the default window");
    app.add_option("--grid", a.grid, "evaluation grid: N points over the window, or lo:hi:N");
    app.add_option("--constants", a.constants, "contraction constants eps=..,c=..,b=..");
    app.add_option("--out", out, "output directory")->required();
}

// Named step functions in a file: a fit result contributes its estimate and
// its baselines, a bare step function contributes itself.
inline std::vector<std::pair<std::string, StepFunction>> load_estimates(const std::string& name, const std::string& text,
                                                                        const std::string& path)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw data_error(path + ": not valid json: " + e.what());
    }
    std::vector<std::pair<std::string, StepFunction>> out;
    try {
        if (j.contains("jump_times")) {
            out.emplace_back(name, j.get<StepFunction>());
        } else if (j.contains("em")) {
            out.emplace_back(name, j.at("em").at("estimate").get<StepFunction>());
            if (j.contains("baselines"))
                for (const auto& [bn, bf] : j.at("baselines").items()) out.emplace_back(name + "." + bn, bf.get<StepFunction>());
        } else if (j.contains("estimate")) {
            out.emplace_back(name, j.at("estimate").get<StepFunction>());
        } else {
            throw data_error(path + ": no step function found");
        }
    } catch (const data_error&) {
        throw;
    } catch (const std::exception& e) {
        throw data_error(path + ": malformed step function: " + e.what());
    }
    return out;
}

inline int run_report(const ReportArgs& a, const Invocation& inv, std::ostream& log)
{
    if (a.estimates.empty() && a.constants.empty()) throw usage_error("report needs --estimate or --constants");
    std::vector<std::pair<std::string, std::string>> inputs;
    std::vector<std::pair<std::string, double>> rows;
    json params = {{"grid", a.grid}};

    if (!a.estimates.empty()) {
        if (a.truth.empty() && a.reference.empty()) throw usage_error("--estimate needs --truth or --reference");
        std::vector<std::pair<std::string, StepFunction>> fits;
        for (const auto& spec : a.estimates) {
            const auto eq = spec.find('=');
            const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
            const std::string name = eq == std::string::npos ? fs::path(path).stem().string() : spec.substr(0, eq);
            const std::string text = read_file(path);
            inputs.emplace_back(path, fingerprint(text));
            for (auto& f : load_estimates(name, text, path)) fits.push_back(std::move(f));
        }
        std::optional<MeanFunctionSpec> truth;
        if (!a.truth.empty()) {
            truth = parse_truth(a.truth);
            truth->check();
            params["truth"] = a.truth;
        }
        std::optional<StepFunction> reference;
        if (!a.reference.empty()) {
            const std::string text = read_file(a.reference);
            inputs.emplace_back(a.reference, fingerprint(text));
            reference = load_estimates("reference", text, a.reference).front().second;
            params["reference"] = a.reference;
        }
        std::optional<EmpiricalPairMeasure> measure;
        double lo = 0.0, hi = 0.0;
        if (!a.data.empty()) {
            const std::string text = read_file(a.data);
            inputs.emplace_back(a.data, fingerprint(text));
            std::istringstream in(text);
            IngestOptions ingest;
            ingest.allow_fractional = true;
            const PanelDataset ds = read_panel_csv(in, ingest);
            if (ds.empty()) throw data_error("no subjects in " + a.data);
            const auto rep = validate(ds);
            lo = *rep.effective.tau0;
            hi = *rep.effective.tau;
            measure = EmpiricalPairMeasure::from_dataset(ds);
            params["data"] = a.data;
        } else {
            lo = std::numeric_limits<double>::infinity();
            for (const auto& [n, f] : fits)
                if (!f.empty()) {
                    lo = std::min(lo, f.jump_times().front());
                    hi = std::max(hi, f.jump_times().back());
                }
            if (!std::isfinite(lo)) lo = hi = 0.0;
        }
        const std::vector<double> grid = parse_grid(a.grid, lo, hi);
        for (const auto& [name, f] : fits) {
            if (truth) {
                const auto e = grid_errors(f, *truth, grid);
                rows.emplace_back(name + ".sup", e.sup);
                rows.emplace_back(name + ".rmse", e.rmse);
                if (measure) rows.emplace_back(name + ".d2", d2_distance(f, *truth, *measure));
            }
            if (reference) {
                const auto e = grid_errors(f, *reference, grid);
                rows.emplace_back(name + ".sup_ref", e.sup);
                rows.emplace_back(name + ".rmse_ref", e.rmse);
                if (measure) rows.emplace_back(name + ".d2_ref", d2_distance(f, *reference, *measure));
            }
        }
    }

    if (!a.constants.empty()) {
        std::optional<double> eps, c, b;
        for (const auto& item : split(a.constants, ',')) {
            const auto kv = split(item, '=');
            if (kv.size() != 2) throw usage_error("--constants entries must look like key=value");
            const double v = number(kv[1], "--constants");
            if (kv[0] == "eps") eps = v;
            else if (kv[0] == "c") c = v;
            else if (kv[0] == "b") b = v;
            else throw usage_error("--constants: unknown key '" + kv[0] + "'");
        }
        if (!eps || !c || !b) throw usage_error("--constants needs eps, c and b");
        const auto k = contraction_constants(*eps, *c, *b);
        rows.emplace_back("gamma", k.gamma);
        rows.emplace_back("nu", k.nu);
        rows.emplace_back("kappa", k.kappa);
        rows.emplace_back("threshold", k.threshold);
        rows.emplace_back("contracts", k.contracts ? 1.0 : 0.0);
        params["constants"] = a.constants;
    }

    std::ostringstream csv;
    write_metric_csv(csv, rows);
    OutputDir out(inv.out);
    out.write("metrics.csv", csv.str());
    auto artifacts = out.artifacts();
    out.write("manifest.json", manifest_text(inv, 0, params, artifacts, inputs));
    log << csv.str();
    return ok;
}

// Separates --out from the arguments recorded in the manifest.
inline Invocation split_invocation(const std::string& command, const std::vector<std::string>& args)
{
    Invocation inv{command, {}, {}};
    for (std::size_t k = 0; k < args.size(); ++k) {
        if (args[k] == "--out") {
            ++k;
            continue;
        }
        if (args[k].rfind("--out=", 0) == 0) continue;
        inv.args.push_back(args[k]);
    }
    return inv;
}

}  // namespace detail

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

namespace detail {

inline int run_rerun(const std::string& manifest_path, const std::string& out_dir, std::ostream& out, std::ostream& err)
{
    const std::string text = read_file(manifest_path);
    json m;
    try {
        m = json::parse(text);
    } catch (const std::exception& e) {
        throw data_error(manifest_path + ": not valid json: " + e.what());
    }
    if (!m.contains("command") || !m.contains("args")) throw data_error(manifest_path + ": not a pcem manifest");
    const std::string command = m.at("command").get<std::string>();
    if (command == "rerun") throw data_error(manifest_path + ": refusing to rerun a rerun manifest");
    if (m.value("version", std::string()) != PCEM_VERSION)
        err << "warning: manifest written by pcem " << m.value("version", std::string("?")) << ", running "
            << PCEM_VERSION << '\n';
    for (const auto& in : m.value("inputs", json::array())) {
        const std::string path = in.at("path").get<std::string>();
        if (fingerprint(read_file(path)) != in.at("fnv1a64").get<std::string>())
            throw data_error("input " + path + " changed since the manifest was written");
    }
    std::vector<std::string> argv{command};
    for (const auto& a : m.at("args")) argv.push_back(a.get<std::string>());
    argv.push_back("--out");
    argv.push_back(out_dir);
    return run(argv, out, err);
}

}  // namespace detail

// Runs one command line (without the program name). Returns the exit code.
inline int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"pcem: functional EM for panel count data with missing counts", "pcem"};
    app.set_version_flag("--version", PCEM_VERSION);
    app.require_subcommand(1);

    std::string out_dir;
    detail::SimulateArgs sim;
    detail::FitArgs fit;
    detail::ReportArgs rep;
    std::string manifest;

    auto* c_sim = app.add_subcommand("simulate", "simulate panel count data with missing counts");
    detail::add_simulate(*c_sim, sim, out_dir);
    auto* c_fit = app.add_subcommand("fit", "fit the mean function by EM, with optional bootstrap band");
    detail::add_fit(*c_fit, fit, out_dir);
    auto* c_rep = app.add_subcommand("report", "error metrics against a truth or reference, and contraction constants");
    detail::add_report(*c_rep, rep, out_dir);
    auto* c_rerun = app.add_subcommand("rerun", "repeat a run from its manifest");
    c_rerun->add_option("manifest", manifest, "manifest.json of an earlier run")->required();
    c_rerun->add_option("--out", out_dir, "output directory")->required();

    try {
        std::vector<std::string> reversed(argv.rbegin(), argv.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::CallForVersion&) {
        out << PCEM_VERSION << '\n';
        return ok;
    } catch (const CLI::ParseError& e) {
        err << "pcem: " << e.what() << '\n';
        return usage;
    }

    try {
        const std::vector<std::string> rest(argv.begin() + 1, argv.end());
        const detail::Invocation inv = [&] {
            auto i = detail::split_invocation(argv.front(), rest);
            i.out = out_dir;
            return i;
        }();
        if (c_sim->parsed()) return detail::run_simulate(sim, inv, out);
        if (c_fit->parsed()) return detail::run_fit(fit, inv, out);
        if (c_rep->parsed()) return detail::run_report(rep, inv, out);
        return detail::run_rerun(manifest, out_dir, out, err);
    } catch (const data_error& e) {
        err << "pcem: data error: " << e.what() << '\n';
        return data_failure;
    } catch (const numerical_error& e) {
        err << "pcem: numerical failure: " << e.what() << '\n';
        return numerical_failure;
    } catch (const std::invalid_argument& e) {
        err << "pcem: " << e.what() << '\n';
        return usage;
    } catch (const std::exception& e) {
        err << "pcem: numerical failure: " << e.what() << '\n';
        return numerical_failure;
    }
}

}  // namespace pcem::cli

#endif  // PCEM_CLI_HPP
