#include "catch_amalgamated.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pcem/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run
{
    int code = 0;
    std::string out;
    std::string err;
};

Run pcem_run(std::vector<std::string> args)
{
    std::ostringstream out, err;
    Run r;
    r.code = pcem::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path workdir(const std::string& name)
{
    const fs::path p = fs::current_path() / "cli_work" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void require_same_outputs(const fs::path& a, const fs::path& b)
{
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename().string());
    std::size_t count_b = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++count_b;
    REQUIRE(names.size() == count_b);
    for (const auto& n : names) {
        INFO(n);
        REQUIRE(slurp(a / n) == slurp(b / n));
    }
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("simulate reproduces the hundred-by-thirty regime", "[cli]")
{
    const auto dir = workdir("sim");
    const auto r = pcem_run({"simulate", "--mean", "sqrt", "--n", "100", "--k", "30", "--eps", "0.2", "--seed", "1",
                             "--out", (dir / "a").string()});
    REQUIRE(r.code == 0);
    std::istringstream in(slurp(dir / "a" / "panel.csv"));
    const auto ds = pcem::read_panel_csv(in);
    CHECK(ds.size() == 100);
    for (const auto& tr : ds.trajectories()) CHECK(tr.size() == 30);
    CHECK(std::abs(pcem::observed_fraction(ds) - 0.8) < 0.03);
    const auto m = json::parse(slurp(dir / "a" / "manifest.json"));
    CHECK(m.at("command") == "simulate");
    CHECK(m.at("seed") == 1);
    CHECK(m.at("parameters").at("eps") == 0.2);
    CHECK(m.at("parameters").at("tau0") == 0.1);
    CHECK(m.at("parameters").at("tau") == 10.0);
}

TEST_CASE("simulate with eps zero is complete and eps one is a usage error", "[cli]")
{
    const auto dir = workdir("sim0");
    REQUIRE(pcem_run({"simulate", "--n", "20", "--k", "5", "--eps", "0", "--out", (dir / "a").string()}).code == 0);
    CHECK(slurp(dir / "a" / "panel.csv") == slurp(dir / "a" / "complete.csv"));
    const auto bad = pcem_run({"simulate", "--eps", "1.0", "--out", (dir / "b").string()});
    CHECK(bad.code == 2);
    CHECK_FALSE(bad.err.empty());
    CHECK(pcem_run({"simulate", "--missingness", "het", "--eps", "0.6", "--out", (dir / "c").string()}).code == 2);
    CHECK(pcem_run({"simulate", "--mean", "cubic", "--out", (dir / "d").string()}).code == 2);
    CHECK(pcem_run({"simulate"}).code == 2);
    CHECK(pcem_run({"bogus"}).code == 2);
    CHECK(pcem_run({}).code == 2);
}

TEST_CASE("fit without bootstrap emits the point estimate only", "[cli]")
{
    const auto dir = workdir("fit0");
    REQUIRE(pcem_run({"simulate", "--n", "30", "--k", "8", "--seed", "3", "--out", (dir / "sim").string()}).code == 0);
    const auto r = pcem_run({"fit", "--data", (dir / "sim" / "panel.csv").string(), "--tau0", "0.1", "--tau", "10",
                             "--grid", "40", "--boot", "0", "--out", (dir / "fit").string()});
    REQUIRE(r.code == 0);
    CHECK_FALSE(fs::exists(dir / "fit" / "band.csv"));
    const auto res = json::parse(slurp(dir / "fit" / "result.json"));
    CHECK(res.at("em").at("converged") == true);
    CHECK(res.at("grid").size() == 40);
    CHECK(res.at("grid").front() == 0.1);
    const auto est = slurp(dir / "fit" / "estimate.csv");
    CHECK(est.rfind("t,estimate\n", 0) == 0);
    CHECK(count_lines(est) == 41);
    const auto svg = slurp(dir / "fit" / "plot.svg");
    CHECK(svg.rfind("<?xml", 0) == 0);
    CHECK(svg.find("width=\"800\" height=\"500\"") != std::string::npos);
    CHECK(svg.find("</svg>") != std::string::npos);
    CHECK(svg.find("<polygon") == std::string::npos);
}

TEST_CASE("fit with baselines and bootstrap band", "[cli]")
{
    const auto dir = workdir("fitb");
    REQUIRE(pcem_run({"simulate", "--n", "25", "--k", "6", "--eps", "0.3", "--seed", "4", "--out", (dir / "sim").string()}).code == 0);
    const auto r = pcem_run({"fit", "--data", (dir / "sim" / "panel.csv").string(), "--baseline", "zero-fill", "drop",
                             "--boot", "8", "--grid", "0.5:9:20", "--truth", "sqrt", "--seed", "5", "--out",
                             (dir / "fit").string()});
    REQUIRE(r.code == 0);
    const auto est = slurp(dir / "fit" / "estimate.csv");
    CHECK(est.rfind("t,estimate,zero-fill,drop\n", 0) == 0);
    const auto band = slurp(dir / "fit" / "band.csv");
    CHECK(band.rfind("t,mean,lower,upper\n", 0) == 0);
    CHECK(count_lines(band) == 21);
    const auto res = json::parse(slurp(dir / "fit" / "result.json"));
    CHECK(res.at("baselines").contains("zero-fill"));
    CHECK(res.at("band").at("replicates") == 8);
    const auto svg = slurp(dir / "fit" / "plot.svg");
    CHECK(svg.find("<polygon") != std::string::npos);
    CHECK(svg.find(">truth<") != std::string::npos);
    CHECK(svg.find(">zero-fill<") != std::string::npos);
}

TEST_CASE("fit outputs are deterministic under a fixed seed", "[cli]")
{
    const auto dir = workdir("det");
    REQUIRE(pcem_run({"simulate", "--n", "20", "--k", "6", "--seed", "6", "--out", (dir / "sim").string()}).code == 0);
    for (const char* sub : {"a", "b"})
        REQUIRE(pcem_run({"fit", "--data", (dir / "sim" / "panel.csv").string(), "--boot", "5", "--starts", "2",
                          "--init", "poisson:1", "poisson:4", "--seed", "9", "--out", (dir / sub).string()})
                    .code == 0);
    require_same_outputs(dir / "a", dir / "b");
    const auto res = json::parse(slurp(dir / "a" / "result.json"));
    CHECK(res.at("em").at("starts").size() == 4);
}

TEST_CASE("fit rejects bad data with the data exit code", "[cli]")
{
    const auto dir = workdir("bad");
    {
        std::ofstream f(dir / "gap.csv");
        f << "subject,t_prev,t,count\na,0,1,1\na,1.5,2,1\n";
    }
    const auto gap = pcem_run({"fit", "--data", (dir / "gap.csv").string(), "--out", (dir / "o1").string()});
    CHECK(gap.code == 3);
    CHECK(gap.err.find("non-contiguous") != std::string::npos);
    {
        std::ofstream f(dir / "close.csv");
        f << "subject,t_prev,t,count\na,0,1,1\na,1,1.1,1\n";
    }
    CHECK(pcem_run({"fit", "--data", (dir / "close.csv").string(), "--alpha", "0.5", "--out", (dir / "o2").string()}).code == 3);
    CHECK(pcem_run({"fit", "--data", (dir / "missing.csv").string(), "--out", (dir / "o3").string()}).code == 3);
    {
        std::ofstream f(dir / "allmissing.csv");
        f << "subject,t_prev,t,count\na,0,1,\n";
    }
    CHECK(pcem_run({"fit", "--data", (dir / "allmissing.csv").string(), "--out", (dir / "o4").string()}).code == 3);
    CHECK(pcem_run({"fit", "--data", (dir / "close.csv").string(), "--init", "gamma:2", "--out", (dir / "o5").string()}).code == 2);
}

TEST_CASE("report rows for estimators and constants", "[cli]")
{
    const auto dir = workdir("report");
    REQUIRE(pcem_run({"simulate", "--n", "30", "--k", "8", "--seed", "7", "--out", (dir / "sim").string()}).code == 0);
    REQUIRE(pcem_run({"fit", "--data", (dir / "sim" / "panel.csv").string(), "--baseline", "zero-fill", "--out",
                      (dir / "fit").string()})
                .code == 0);
    const auto r = pcem_run({"report", "--estimate", "em=" + (dir / "fit" / "result.json").string(), "--truth", "sqrt",
                             "--data", (dir / "sim" / "panel.csv").string(), "--out", (dir / "rep").string()});
    REQUIRE(r.code == 0);
    const auto csv = slurp(dir / "rep" / "metrics.csv");
    CHECK(csv.rfind("metric,value\n", 0) == 0);
    for (const char* row : {"\nem.sup,", "\nem.rmse,", "\nem.d2,", "\nem.zero-fill.sup,", "\nem.zero-fill.rmse,"})
        CHECK(csv.find(row) != std::string::npos);

    const auto k = pcem_run({"report", "--constants", "eps=0.2,c=1,b=1", "--out", (dir / "k").string()});
    REQUIRE(k.code == 0);
    CHECK(slurp(dir / "k" / "metrics.csv").find("\nkappa,0.75\n") != std::string::npos);
    CHECK(slurp(dir / "k" / "metrics.csv").find("\ncontracts,1\n") != std::string::npos);

    const auto missing = pcem_run({"report", "--estimate", (dir / "nope.json").string(), "--truth", "sqrt", "--out",
                                   (dir / "m").string()});
    CHECK(missing.code != 0);
    CHECK(missing.err.find("nope.json") != std::string::npos);
    CHECK(pcem_run({"report", "--constants", "eps=0.2,c=1", "--out", (dir / "m2").string()}).code == 2);
    CHECK(pcem_run({"report", "--out", (dir / "m3").string()}).code == 2);
}

TEST_CASE("every subcommand reruns from its manifest byte for byte", "[cli]")
{
    const auto dir = workdir("rerun");
    REQUIRE(pcem_run({"simulate", "--mean", "square", "--n", "20", "--k", "5", "--missingness", "mar", "--seed", "8",
                      "--out", (dir / "sim").string()})
                .code == 0);
    REQUIRE(pcem_run({"rerun", (dir / "sim" / "manifest.json").string(), "--out", (dir / "sim2").string()}).code == 0);
    require_same_outputs(dir / "sim", dir / "sim2");

    REQUIRE(pcem_run({"fit", "--data", (dir / "sim" / "panel.csv").string(), "--boot", "4", "--baseline", "drop",
                      "--out", (dir / "fit").string()})
                .code == 0);
    REQUIRE(pcem_run({"rerun", (dir / "fit" / "manifest.json").string(), "--out", (dir / "fit2").string()}).code == 0);
    require_same_outputs(dir / "fit", dir / "fit2");

    REQUIRE(pcem_run({"report", "--estimate", (dir / "fit" / "result.json").string(), "--truth", "square", "--grid",
                      "0.1:10:30", "--constants", "eps=0.1,c=2,b=1", "--out", (dir / "rep").string()})
                .code == 0);
    REQUIRE(pcem_run({"rerun", (dir / "rep" / "manifest.json").string(), "--out", (dir / "rep2").string()}).code == 0);
    require_same_outputs(dir / "rep", dir / "rep2");

    // A changed input is refused.
    {
        std::ofstream f(dir / "sim" / "panel.csv", std::ios::app);
        f << "zz,0,1,1\n";
    }
    CHECK(pcem_run({"rerun", (dir / "fit" / "manifest.json").string(), "--out", (dir / "fit3").string()}).code == 3);
}

TEST_CASE("the installed binary reports its version and exit codes", "[cli]")
{
    const std::string exe = PCEM_CLI_PATH;
    CHECK(std::system((exe + " --version > /dev/null").c_str()) == 0);
    const int usage = std::system((exe + " simulate --eps 1.0 --out cli_work/x > /dev/null 2>&1").c_str());
    REQUIRE(WIFEXITED(usage));
    CHECK(WEXITSTATUS(usage) == 2);
}
