#include "catch_amalgamated.hpp"

#include <sstream>

#include "pcem/panel.hpp"
#include "pcem/panel_csv.hpp"
#include "pcem/simulate.hpp"

using namespace pcem;

namespace {

Trajectory traj(std::string id, std::vector<double> times, std::vector<std::optional<double>> counts)
{
    std::vector<IntervalObservation> ivs;
    double prev = 0.0;
    for (std::size_t j = 0; j < times.size(); ++j) {
        ivs.push_back({prev, times[j], counts[j]});
        prev = times[j];
    }
    return Trajectory(std::move(id), std::move(ivs));
}

StudyDesign design(double tau0, double tau, std::size_t k0, double alpha)
{
    return StudyDesign{tau0, tau, k0, alpha};
}

}  // namespace

TEST_CASE("trajectory rejects gaps, reversed and empty intervals", "[panel]")
{
    CHECK_THROWS_AS(Trajectory("a", {}), data_error);
    CHECK_THROWS_AS(Trajectory("a", {{0.0, 1.0, 1.0}, {1.5, 2.0, 1.0}}), data_error);
    CHECK_THROWS_AS(Trajectory("a", {{0.5, 1.0, 1.0}}), data_error);
    CHECK_THROWS_AS(Trajectory("a", {{0.0, 1.0, 1.0}, {1.0, 1.0, 1.0}}), data_error);
    CHECK_THROWS_AS(Trajectory("a", {{0.0, 1.0, -1.0}}), data_error);
    CHECK_NOTHROW(Trajectory("a", {{0.0, 1.0, std::nullopt}, {1.0, 2.0, 0.5}}));
}

TEST_CASE("validate flags half-alpha spacing once", "[panel]")
{
    PanelDataset ds({traj("s1", {1.0, 1.25, 3.0}, {1.0, 0.0, 2.0}), traj("s2", {1.0, 2.0}, {0.0, 1.0})},
                    design(0.5, 5.0, 3, 0.5));
    const auto rep = validate(ds);
    REQUIRE(rep.violations.size() == 1);
    CHECK(rep.violations[0].assumption == Assumption::alpha_separation);
    CHECK(rep.violations[0].subject_id == "s1");
    CHECK(rep.violations[0].interval == 2);
    CHECK(rep.violations[0].value == Catch::Approx(0.25));
}

TEST_CASE("validate is clean when bounds hold", "[panel]")
{
    PanelDataset ds({traj("s1", {1.0, 2.0, 3.0}, {1.0, 0.0, 2.0})}, design(0.5, 5.0, 3, 0.5));
    const auto rep = validate(ds);
    CHECK(rep.ok());
    CHECK(rep.inferred.empty());
}

TEST_CASE("validate flags one extra observation", "[panel]")
{
    PanelDataset ds({traj("s1", {1.0, 2.0, 3.0, 4.0}, {1.0, 0.0, 2.0, 1.0}), traj("s2", {1.0}, {1.0})},
                    design(0.5, 5.0, 3, 0.5));
    const auto rep = validate(ds);
    REQUIRE(rep.violations.size() == 1);
    CHECK(rep.violations[0].assumption == Assumption::bounded_observations);
    CHECK(rep.violations[0].subject_id == "s1");
}

TEST_CASE("validate flags times outside the window", "[panel]")
{
    PanelDataset ds({traj("s1", {0.2, 2.0, 6.0}, {1.0, 0.0, 2.0})}, design(0.5, 5.0, 3, 0.5));
    const auto rep = validate(ds);
    REQUIRE(rep.violations.size() == 2);
    CHECK(rep.violations[0].assumption == Assumption::observation_window);
    CHECK(rep.violations[0].interval == 1);
    CHECK(rep.violations[1].interval == 3);
}

TEST_CASE("validate infers missing metadata as the tightest consistent values", "[panel]")
{
    PanelDataset ds({traj("s1", {0.7, 2.0, 2.5}, {1.0, 0.0, 2.0}), traj("s2", {1.0, 4.0}, {0.0, 1.0})});
    const auto rep = validate(ds);
    CHECK(rep.ok());
    CHECK(rep.inferred.size() == 4);
    CHECK(*rep.effective.tau0 == 0.7);
    CHECK(*rep.effective.tau == 4.0);
    CHECK(*rep.effective.k0 == 3);
    CHECK(*rep.effective.alpha == Catch::Approx(0.5));
}

TEST_CASE("declared metadata is compared against the data", "[panel]")
{
    PanelDataset ds({traj("s1", {0.7, 2.0, 2.5}, {1.0, 0.0, 2.0})}, StudyDesign{std::nullopt, 3.0, std::nullopt, 0.6});
    const auto rep = validate(ds);
    REQUIRE(rep.violations.size() == 1);
    CHECK(rep.violations[0].assumption == Assumption::alpha_separation);
    CHECK(rep.observed.alpha == Catch::Approx(0.5));
    CHECK(rep.inferred == std::vector<std::string>{"tau0", "k0"});
}

TEST_CASE("validate is pure", "[panel]")
{
    const auto ds = corrupt(sample_panel({}, {.k = 8}, 20, 3), Mcar{0.3}, 4).with_design(design(1.0, 9.0, 5, 0.3));
    const auto a = validate(ds);
    const auto b = validate(ds);
    CHECK(a == b);
    CHECK_FALSE(a.ok());
}

TEST_CASE("observed fraction counts present increments", "[panel]")
{
    PanelDataset all({traj("a", {1.0, 2.0}, {1.0, 2.0}), traj("b", {1.0, 2.0}, {0.0, 0.0})});
    CHECK(observed_fraction(all) == 1.0);
    PanelDataset none({traj("a", {1.0, 2.0}, {std::nullopt, std::nullopt})});
    CHECK(observed_fraction(none) == 0.0);
    PanelDataset three({traj("a", {1.0, 2.0}, {1.0, std::nullopt}), traj("b", {1.0, 2.0}, {0.0, 3.0})});
    CHECK(observed_fraction(three) == 0.75);
    CHECK_THROWS_AS(observed_fraction(PanelDataset{}), data_error);
}

TEST_CASE("csv round trip preserves times bit-exactly and missing markers", "[panel]")
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        MeanFunctionSpec mean{.frailty = true};
        auto ds = corrupt(sample_panel(mean, {.k = 12}, 15, seed), Mcar{0.3}, seed + 100);
        if (seed % 2 == 1) ds = jitter_times(ds, 1e-6, seed);
        std::istringstream in(to_panel_csv(ds));
        const auto back = read_panel_csv(in, {}, ds.design());
        CHECK(back == ds);
    }
}

TEST_CASE("csv parser enforces its format", "[panel]")
{
    auto parse = [](const std::string& text, IngestOptions opts = {}) {
        std::istringstream in(text);
        return read_panel_csv(in, opts);
    };
    CHECK_THROWS_AS(parse(""), data_error);
    CHECK_THROWS_AS(parse("id,t_prev,t,count\na,0,1,1\n"), data_error);
    CHECK_THROWS_AS(parse("subject,t_prev,t,count\na,0,1,1\na,1.5,2,1\n"), data_error);
    CHECK_THROWS_AS(parse("subject,t_prev,t,count\na,0,1,1\nb,0,1,1\na,1,2,1\n"), data_error);
    CHECK_THROWS_AS(parse("subject,t_prev,t,count\na,0,1,x\n"), data_error);
    CHECK_THROWS_AS(parse("subject,t_prev,t,count\na,0,1,-1\n"), data_error);
    CHECK_THROWS_AS(parse("subject,t_prev,t,count\na,0,1,1.5\n"), data_error);
    const auto frac = parse("subject,t_prev,t,count\na,0,1,1.5\n", {.allow_fractional = true});
    CHECK(*frac[0][0].count == 1.5);

    const auto ds = parse("subject,t_prev,t,count\r\na,0,1,2\r\na,1,2.5,\r\nb,0,0.5,0\r\n");
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].size() == 2);
    CHECK(ds[0][1].missing());
    CHECK(ds[0][1].t == 2.5);
    CHECK(*ds[1][0].count == 0.0);
}

TEST_CASE("jitter is applied only on request and keeps intervals contiguous", "[panel]")
{
    const std::string text = "subject,t_prev,t,count\na,0,1,2\na,1,2,1\nb,0,1,0\n";
    std::istringstream plain(text);
    const auto untouched = read_panel_csv(plain);
    CHECK(untouched[0][0].t == 1.0);
    CHECK(untouched[1][0].t == 1.0);

    std::istringstream in(text);
    const auto ds = read_panel_csv(in, {.jitter = 1e-6, .jitter_seed = 9});
    CHECK(ds[0][0].t != ds[1][0].t);
    CHECK(std::abs(ds[0][0].t - 1.0) <= 1e-6);
    CHECK(ds[0][1].t_prev == ds[0][0].t);
    CHECK(*ds[0][1].count == 1.0);
}
