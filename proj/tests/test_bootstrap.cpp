#include "catch_amalgamated.hpp"

#include <sstream>

#include "pcem/bootstrap.hpp"
#include "pcem/metrics.hpp"
#include "pcem/simulate.hpp"

using namespace pcem;

namespace {

PanelDataset panel(std::size_t n, std::uint64_t seed)
{
    return corrupt(sample_panel({.frailty = true}, {.k = 10}, n, seed), Mcar{0.2}, seed + 1);
}

void check_ordered(const BootstrapBand& band)
{
    for (std::size_t g = 0; g < band.grid.size(); ++g) {
        REQUIRE(band.lower[g] <= band.mean[g]);
        REQUIRE(band.mean[g] <= band.upper[g]);
    }
}

}  // namespace

TEST_CASE("nearest rank quantiles", "[bootstrap]")
{
    const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    CHECK(nearest_rank(v, 0.025) == 1);
    CHECK(nearest_rank(v, 0.5) == 5);
    CHECK(nearest_rank(v, 0.975) == 10);
    CHECK(nearest_rank(v, 0.0) == 1);
    CHECK_THROWS_AS(nearest_rank(std::vector<double>{}, 0.5), std::invalid_argument);
}

TEST_CASE("a single subject gives a zero-width band at the point fit", "[bootstrap]")
{
    PanelDataset one({Trajectory("a", {{0, 1, 2.0}, {1, 2, 0.0}, {2, 3, 1.0}})});
    const auto grid = linspace(0.5, 3.0, 6);
    const auto band = bootstrap_fit(one, {}, grid, {.replicates = 5, .seed = 3});
    const auto fit = em_fit(one, {});
    CHECK(band.replicates == 5);
    for (std::size_t g = 0; g < grid.size(); ++g) {
        CHECK(band.lower[g] == band.upper[g]);
        CHECK(band.mean[g] == Catch::Approx(fit.estimate(grid[g])).margin(1e-9));
    }
}

TEST_CASE("one replicate gives the replicate curve", "[bootstrap]")
{
    const auto ds = panel(30, 1);
    const auto grid = linspace(0.1, 10.0, 20);
    const auto band = bootstrap_fit(ds, {}, grid, {.replicates = 1, .seed = 5});
    for (std::size_t g = 0; g < grid.size(); ++g) {
        CHECK(band.lower[g] == band.mean[g]);
        CHECK(band.upper[g] == band.mean[g]);
    }
    EmConfig cfg;
    cfg.rng_seed = derive_seed(derive_seed(5, 0), 2);
    const auto r = em_fit(resample_subjects(ds, 5, 0), cfg);
    for (std::size_t g = 0; g < grid.size(); ++g) CHECK(band.mean[g] == r.estimate(grid[g]));
}

TEST_CASE("band is ordered, deterministic and thread independent", "[bootstrap]")
{
    const auto ds = panel(30, 2);
    const auto grid = linspace(0.1, 10.0, 25);
    BootstrapOptions opt{.replicates = 20, .level = 0.9, .seed = 8};
    const auto a = bootstrap_fit(ds, {}, grid, opt);
    check_ordered(a);
    opt.threads = 3;
    const auto b = bootstrap_fit(ds, {}, grid, opt);
    CHECK(a.mean == b.mean);
    CHECK(a.lower == b.lower);
    CHECK(a.upper == b.upper);
    CHECK(a.failed == 0);
}

TEST_CASE("resampling depends only on seed and replicate index", "[bootstrap]")
{
    const auto ds = panel(20, 3);
    CHECK(resample_subjects(ds, 4, 7) == resample_subjects(ds, 4, 7));
    CHECK_FALSE(resample_subjects(ds, 4, 7) == resample_subjects(ds, 4, 8));
    CHECK(resample_subjects(ds, 4, 7).size() == ds.size());
}

TEST_CASE("band narrows with four times the subjects", "[bootstrap]")
{
    const auto grid = linspace(1.0, 10.0, 10);
    double small = 0.0, large = 0.0;
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
        const BootstrapOptions opt{.replicates = 30, .level = 0.9, .seed = seed};
        const auto a = bootstrap_fit(panel(25, 10 + seed), {}, grid, opt);
        const auto b = bootstrap_fit(panel(100, 20 + seed), {}, grid, opt);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            small += a.upper[g] - a.lower[g];
            large += b.upper[g] - b.lower[g];
        }
    }
    CHECK(small >= 1.3 * large);
}

TEST_CASE("too many failed replicates is an error", "[bootstrap]")
{
    std::vector<Trajectory> trs{Trajectory("obs", {{0, 1, 1.0}})};
    for (int i = 0; i < 9; ++i) trs.emplace_back("m" + std::to_string(i), std::vector<IntervalObservation>{{0, 1, std::nullopt}});
    const PanelDataset ds(trs);
    const std::vector<double> grid{1.0};
    CHECK_THROWS_AS(bootstrap_fit(ds, {}, grid, {.replicates = 40, .seed = 1}), numerical_error);
    const auto band = bootstrap_fit(ds, {}, grid, {.replicates = 40, .seed = 1, .max_failure_fraction = 0.9});
    CHECK(band.failed > 0);
    CHECK(band.failed + band.replicates == 40);
    CHECK(band.failures.size() == band.failed);
}

TEST_CASE("bootstrap argument checks and csv output", "[bootstrap]")
{
    const auto ds = panel(5, 4);
    const std::vector<double> outside{0.5, 11.0};
    CHECK_THROWS_AS(bootstrap_fit(ds, {}, outside, {.replicates = 2}), std::invalid_argument);
    const std::vector<double> grid{1.0, 2.0};
    CHECK_THROWS_AS(bootstrap_fit(ds, {}, grid, {.replicates = 0}), std::invalid_argument);
    CHECK_THROWS_AS(bootstrap_fit(ds, {}, grid, {.replicates = 2, .level = 1.0}), std::invalid_argument);

    BootstrapBand band;
    band.grid = {1.0};
    band.mean = {2.0};
    band.lower = {1.5};
    band.upper = {2.5};
    std::ostringstream os;
    write_band_csv(os, band);
    CHECK(os.str() == "t,mean,lower,upper\n1,2,1.5,2.5\n");
}
