#include <doctest.h>

#include "dersec/common.hpp"
#include "dersec/pv_plant.hpp"
#include "oracles.hpp"

using namespace dersec;

namespace {

PvArrayTruth default_array() {
    PvArrayTruth a;
    a.v_oc = 40.0;
    a.i_sc = 8.0;
    a.i_0 = 1e-4;
    a.p_base_w = 700.0;
    a.g_ref = 1000.0;
    a.v_min = 0.0;
    a.v_max = 40.0;
    return a;
}

} // namespace

TEST_CASE("pv power: dark array produces nothing") {
    const PvArrayTruth a = default_array();
    CHECK(pv_power(a, 25.0, 0.0) == 0.0);
}

TEST_CASE("pv power: zero voltage produces nothing") {
    const PvArrayTruth a = default_array();
    CHECK(pv_power(a, 0.0, 800.0) == 0.0);
}

TEST_CASE("pv power: open-circuit voltage produces nothing by construction") {
    const PvArrayTruth a = default_array();
    CHECK(std::abs(pv_power(a, a.v_oc, 1000.0)) <= 1e-12);
}

TEST_CASE("pv power: rejects voltages outside the window") {
    const PvArrayTruth a = default_array();
    CHECK_THROWS_AS(pv_power(a, 41.0, 500.0), InfeasibleError);
    CHECK_THROWS_AS(pv_power(a, -1.0, 500.0), InfeasibleError);
}

TEST_CASE("pv capacity: matches the grid-search oracle") {
    const PvArrayTruth a = default_array();
    for (double g : {200.0, 600.0, 1000.0}) {
        const PvCapacity cap = true_capacity(a, g);
        const PvCapacity oracle = testing::pv_grid_oracle(a, g);
        CHECK(std::abs(cap.p_max - oracle.p_max) <= 1e-8);
        CHECK(pv_power(a, cap.v_mpp, g) >= oracle.p_max - 1e-8);
    }
}

TEST_CASE("pv capacity: zero irradiance yields zero power") {
    const PvArrayTruth a = default_array();
    CHECK(true_capacity(a, 0.0).p_max == 0.0);
}

TEST_CASE("pv capacity: power scales linearly with irradiance") {
    const PvArrayTruth a = default_array();
    const double p1 = true_capacity(a, 400.0).p_max;
    const double p2 = true_capacity(a, 800.0).p_max;
    CHECK(p2 / p1 == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("pv truth: concave in voltage and monotone in irradiance") {
    Rng rng(11);
    for (int draw = 0; draw < 10; ++draw) {
        PvArrayTruth a = default_array();
        a.v_oc = rng.uniform(30.0, 60.0);
        a.i_sc = rng.uniform(4.0, 12.0);
        a.i_0 = rng.uniform(1e-7, 1e-5);
        a.v_max = a.v_oc;
        a.p_base_w = rng.uniform(500.0, 1500.0);
        const double g = rng.uniform(100.0, 1200.0);

        constexpr int grid = 1000;
        double prev = 0.0, cur = 0.0;
        for (int i = 0; i < grid; ++i) {
            const double v = a.v_min + (a.v_max - a.v_min) * i / (grid - 1.0);
            const double p = pv_power(a, v, g);
            const double p_hi = pv_power(a, v, g * 1.5);
            CHECK(p_hi >= p - 1e-12);
            if (i >= 2) {
                // Second difference must stay nonpositive for concavity.
                CHECK(p - 2.0 * cur + prev <= 1e-9);
            }
            prev = cur;
            cur = p;
        }
    }
}

TEST_CASE("irradiance trace: linear interpolation between samples") {
    const IrradianceTrace trace = load_irradiance("time_s,site_1\n0,500\n1,600\n");
    CHECK(trace.at(0.5, 0) == doctest::Approx(550.0));
    CHECK(trace.at(0.0, 0) == doctest::Approx(500.0));
    // Outside the span the trace clamps.
    CHECK(trace.at(-1.0, 0) == doctest::Approx(500.0));
    CHECK(trace.at(5.0, 0) == doctest::Approx(600.0));
}

TEST_CASE("irradiance trace: rejects malformed documents") {
    CHECK_THROWS_AS(load_irradiance(""), ParseError);
    CHECK_THROWS_AS(load_irradiance("time_s,site_1\n"), ParseError);
    CHECK_THROWS_AS(load_irradiance("time_s,site_1\n1,500\n1,600\n"), ParseError);
    CHECK_THROWS_AS(load_irradiance("time_s,site_1\n0,500\n1,-5\n"), ParseError);
    CHECK_THROWS_AS(load_irradiance("time_s,site_1\n0,abc\n"), ParseError);
}

TEST_CASE("irradiance trace: bundled sample parses with increasing timestamps") {
    const IrradianceTrace trace =
        load_irradiance_file(std::string(DERSEC_DATA_DIR) + "/oahu_sample.csv");
    CHECK(trace.site_count() == 2);
    CHECK(trace.end_time() - trace.start_time() == doctest::Approx(200.0));
    for (std::size_t i = 1; i < trace.sample_count(); ++i)
        CHECK(trace.times()[i] > trace.times()[i - 1]);
}
