#include "catch_amalgamated.hpp"

#include <sstream>

#include "pcem/metrics.hpp"
#include "pcem/rng.hpp"

using namespace pcem;

namespace {

StepFunction random_step(Rng& rng)
{
    std::vector<double> times, jumps;
    double t = 0.0;
    for (int k = 0; k < 6; ++k) {
        times.push_back(t += draw_uniform(rng, 0.1, 1.0));
        jumps.push_back(draw_uniform(rng, 0.0, 1.5));
    }
    return StepFunction::from_jumps(times, jumps);
}

}  // namespace

TEST_CASE("d2 distance examples", "[metrics]")
{
    PanelDataset ds({Trajectory("a", {{0, 1, 1.0}, {1, 2, 0.0}})});
    const auto mu = EmpiricalPairMeasure::from_dataset(ds);
    CHECK(mu.size() == 2);
    CHECK(mu.total_mass() == 2.0);
    const StepFunction f({1, 2}, {1, 2});
    const StepFunction g({1, 2}, {2, 4});
    CHECK(d2_distance(f, f, mu) == 0.0);
    CHECK(d2_distance(f, g, mu) == Catch::Approx(std::sqrt(2.0)).epsilon(1e-12));
    CHECK(d2_distance(f, g, mu.scaled(2.0)) == Catch::Approx(2.0).epsilon(1e-12));
    CHECK_THROWS_AS(d2_distance(f, g, EmpiricalPairMeasure{}), std::invalid_argument);
}

TEST_CASE("pair measure masses are 1/n per interval", "[metrics]")
{
    PanelDataset ds({Trajectory("a", {{0, 1, 1.0}, {1, 2, 0.0}, {2, 3, 1.0}}), Trajectory("b", {{0, 1.5, 1.0}})});
    const auto mu = EmpiricalPairMeasure::from_dataset(ds);
    CHECK(mu.total_mass() == Catch::Approx(4.0 / 2.0));
    for (const auto& p : mu.pairs()) CHECK(p.mass == 0.5);
    CHECK_THROWS_AS(EmpiricalPairMeasure({{1.0, 1.0, 1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(EmpiricalPairMeasure({{0.0, 1.0, 0.0}}), std::invalid_argument);
}

TEST_CASE("d2 distance is a pseudo-metric", "[metrics]")
{
    Rng rng(31);
    std::vector<PairMass> pairs;
    for (int k = 0; k < 20; ++k) {
        const double u = draw_uniform(rng, 0.0, 4.0);
        pairs.push_back({u, u + draw_uniform(rng, 0.05, 2.0), draw_uniform(rng, 0.1, 1.0)});
    }
    const EmpiricalPairMeasure mu(pairs);
    for (int rep = 0; rep < 200; ++rep) {
        const auto f = random_step(rng), g = random_step(rng), h = random_step(rng);
        REQUIRE(d2_distance(f, f, mu) == 0.0);
        REQUIRE(d2_distance(f, g, mu) == Catch::Approx(d2_distance(g, f, mu)).epsilon(1e-14));
        REQUIRE(d2_distance(f, g, mu) <= d2_distance(f, h, mu) + d2_distance(h, g, mu) + 1e-12);
    }
    // Shifting by a constant after every pair start leaves increments unchanged.
    const StepFunction a({0.001}, {5.0});
    REQUIRE(d2_distance(a, StepFunction(), EmpiricalPairMeasure({{1.0, 2.0, 1.0}})) == 0.0);
}

TEST_CASE("grid errors examples", "[metrics]")
{
    const std::vector<double> grid{1.0, 2.0, 3.0};
    const StepFunction f({1, 2, 3}, {1, 2, 3});
    auto identity = [](double t) { return t; };
    auto errs = grid_errors(f, identity, grid);
    CHECK(errs.sup == 0.0);
    CHECK(errs.rmse == 0.0);
    errs = grid_errors(f, [](double t) { return t - 0.5; }, grid);
    CHECK(errs.sup == 0.5);
    CHECK(errs.rmse == Catch::Approx(0.5));
    const std::vector<double> two{1.0, 2.0};
    errs = grid_errors(StepFunction(), identity, two);
    CHECK(errs.sup == 2.0);
    CHECK(errs.rmse == Catch::Approx(std::sqrt(2.5)));
    CHECK_THROWS_AS(grid_errors(f, identity, std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("linspace endpoints", "[metrics]")
{
    const auto g = linspace(0.1, 10.0, 50);
    CHECK(g.size() == 50);
    CHECK(g.front() == 0.1);
    CHECK(g.back() == 10.0);
    CHECK(linspace(2.0, 3.0, 1) == std::vector<double>{2.0});
    CHECK_THROWS_AS(linspace(2.0, 1.0, 3), std::invalid_argument);
}

TEST_CASE("contraction constants examples", "[metrics]")
{
    auto k = contraction_constants(0.2, 1.0, 1.0);
    CHECK(k.gamma == Catch::Approx(0.2));
    CHECK(k.nu == Catch::Approx(0.8 / 3.0));
    CHECK(k.kappa == Catch::Approx(0.75));
    CHECK(k.threshold == 0.25);
    CHECK(k.contracts);
    k = contraction_constants(0.0, 1.0, 1.0);
    CHECK(k.gamma == 0.0);
    CHECK(k.kappa == 0.0);
    CHECK(k.contracts);
    CHECK_FALSE(contraction_constants(0.25, 1.0, 1.0).contracts);
    CHECK(contraction_constants(0.2499, 1.0, 1.0).contracts);
    CHECK_THROWS_AS(contraction_constants(1.0, 1.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(contraction_constants(0.1, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(contraction_constants(0.1, 1.0, -1.0), std::invalid_argument);
}

TEST_CASE("kappa is monotone in each argument", "[metrics]")
{
    double prev = -1.0;
    for (double eps = 0.0; eps < 0.99; eps += 0.01) {
        const double k = contraction_constants(eps, 1.0, 1.0).kappa;
        REQUIRE(k > prev);
        prev = k;
    }
    prev = std::numeric_limits<double>::infinity();
    for (double c = 0.1; c < 10.0; c += 0.1) {
        const double k = contraction_constants(0.3, c, 1.0).kappa;
        REQUIRE(k < prev);
        prev = k;
    }
    prev = -1.0;
    for (double b = 0.1; b < 10.0; b += 0.1) {
        const double k = contraction_constants(0.3, 1.0, b).kappa;
        REQUIRE(k > prev);
        prev = k;
    }
    // contracts exactly when kappa < 1
    for (double eps = 0.0; eps < 0.99; eps += 0.013) {
        const auto k = contraction_constants(eps, 2.0, 0.7);
        REQUIRE(k.contracts == (eps < k.threshold));
    }
}

TEST_CASE("h lower bound examples", "[metrics]")
{
    auto r = h_lower_bound_check(1.0);
    CHECK(r.h == 0.0);
    CHECK(r.bound == 0.0);
    CHECK(r.holds);
    r = h_lower_bound_check(0.5);
    CHECK(r.h == Catch::Approx(0.15343).margin(1e-5));
    CHECK(r.bound == Catch::Approx(1.0 / 12.0));
    CHECK(r.holds);
    CHECK(h_lower_bound_check(1.9).holds);
    CHECK_FALSE(h_lower_bound_check(3.0).in_range);
    CHECK_THROWS_AS(h_lower_bound_check(0.0), std::invalid_argument);
}

TEST_CASE("h lower bound holds on random points", "[metrics]")
{
    Rng rng(32);
    for (int k = 0; k < 100000; ++k) {
        const auto r = h_lower_bound_check(draw_uniform(rng, 0.001, 1.999));
        REQUIRE(r.in_range);
        REQUIRE(r.holds);
    }
}

TEST_CASE("metric csv rows", "[metrics]")
{
    std::ostringstream os;
    write_metric_csv(os, {{"sup", 0.5}, {"kappa", 0.75}});
    CHECK(os.str() == "metric,value\nsup,0.5\nkappa,0.75\n");
}
