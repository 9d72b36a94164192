#include <doctest.h>

#include "dersec/common.hpp"
#include "dersec/pv_curve.hpp"
#include "dersec/pv_plant.hpp"
#include "oracles.hpp"

#include <vector>

using namespace dersec;

namespace {

std::vector<std::pair<double, double>> sample_poly(const Eigen::VectorXd& beta,
                                                   double lo, double hi, int count) {
    std::vector<std::pair<double, double>> out;
    for (int i = 0; i < count; ++i) {
        const double v = lo + (hi - lo) * i / (count - 1.0);
        double p = 0.0;
        for (Eigen::Index j = beta.size() - 1; j >= 0; --j)
            p = p * v + beta(j);
        out.emplace_back(v, p);
    }
    return out;
}

} // namespace

TEST_CASE("concave fit: recovers an exactly concave quadratic") {
    Eigen::Vector3d beta(0.0, 4.0, -1.0);  // p = -v^2 + 4v
    const auto samples = sample_poly(beta, 0.0, 4.0, 7);
    const PvCurve curve = fit_concave_poly(samples, 2, 0.0, 4.0);
    CHECK(std::abs(curve.beta(0) - 0.0) <= 1e-6);
    CHECK(std::abs(curve.beta(1) - 4.0) <= 1e-6);
    CHECK(std::abs(curve.beta(2) + 1.0) <= 1e-6);
    CHECK(curve.concavity_certificate());
}

TEST_CASE("concave fit: convex data is flattened by the constraint") {
    Eigen::Vector3d beta(0.0, 0.0, 1.0);  // p = +v^2
    const auto samples = sample_poly(beta, -2.0, 2.0, 9);
    const PvCurve curve = fit_concave_poly(samples, 2, -2.0, 2.0);
    CHECK(curve.beta(2) <= 1e-9);
    CHECK(curve.concavity_certificate(512, 1e-9));
}

TEST_CASE("concave fit: degree-4 fit of the PV truth stays within 2% RMSE") {
    PvArrayTruth array;
    array.v_oc = 40.0;
    array.i_sc = 8.0;
    array.i_0 = 1e-4;
    array.p_base_w = 700.0;
    array.v_max = 40.0;

    const double g = 900.0;
    std::vector<std::pair<double, double>> samples;
    for (int i = 0; i < 10; ++i) {
        const double v = 20.0 + 20.0 * i / 9.0;
        samples.emplace_back(v, pv_power(array, v, g));
    }
    const PvCurve curve = fit_concave_poly(samples, 4, 20.0, 40.0);
    const double p_max = testing::pv_grid_oracle(array, g).p_max;
    CHECK(curve.rmse <= 0.02 * p_max);
    CHECK(curve.concavity_certificate());

    const CurveCapacity cap = estimate_capacity(curve);
    CHECK(std::abs(cap.p_max - p_max) <= 0.03 * p_max);
}

TEST_CASE("concave fit: input validation") {
    const auto samples = sample_poly(Eigen::Vector3d(0.0, 1.0, -1.0), 0.0, 1.0, 3);
    CHECK_THROWS_AS(fit_concave_poly(samples, 4, 0.0, 1.0), Error);  // too few samples
    std::vector<std::pair<double, double>> flat(6, {0.5, 0.25});
    CHECK_THROWS_AS(fit_concave_poly(flat, 2, 0.0, 1.0), Error);  // degenerate design
}

TEST_CASE("curve capacity: interior vertex and boundary maximum") {
    PvCurve parabola;
    parabola.degree = 2;
    parabola.beta = Eigen::Vector3d(-15.0, 10.0, -1.0);  // -(v-5)^2 + 10
    parabola.v_min = 0.0;
    parabola.v_max = 10.0;
    const CurveCapacity cap = estimate_capacity(parabola);
    CHECK(cap.v_mpp == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(cap.p_max == doctest::Approx(10.0).epsilon(1e-9));

    PvCurve ramp;
    ramp.degree = 1;
    ramp.beta = Eigen::Vector2d(0.0, 1.0);  // c(v) = v
    ramp.v_min = 0.0;
    ramp.v_max = 1.0;
    const CurveCapacity boundary = estimate_capacity(ramp);
    CHECK(boundary.v_mpp == doctest::Approx(1.0));
    CHECK(boundary.p_max == doctest::Approx(1.0));
}

TEST_CASE("voltage tracking: vertex, high-side root, and infeasible target") {
    PvCurve parabola;
    parabola.degree = 2;
    parabola.beta = Eigen::Vector3d(-15.0, 10.0, -1.0);
    parabola.v_min = 0.0;
    parabola.v_max = 10.0;

    CHECK(track_voltage(parabola, 10.0) == doctest::Approx(5.0).epsilon(1e-4));
    // Roots of c(v) = 9 are {4, 6}; the high-voltage side wins.
    CHECK(track_voltage(parabola, 9.0) == doctest::Approx(6.0).epsilon(1e-8));
    CHECK_THROWS_AS(track_voltage(parabola, 11.0), InfeasibleError);
}

TEST_CASE("voltage tracking: random feasible targets satisfy the posted tolerance") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        // Random concave quadratic-like degree-4 curve via a fit.
        const double vmax = rng.uniform(5.0, 50.0);
        const double peak = rng.uniform(0.3, 1.2);
        const double vpeak = rng.uniform(0.3 * vmax, 0.9 * vmax);
        std::vector<std::pair<double, double>> samples;
        for (int i = 0; i < 12; ++i) {
            const double v = vmax * i / 11.0;
            samples.emplace_back(v, peak - (v - vpeak) * (v - vpeak) * peak / (vmax * vmax));
        }
        const PvCurve curve = fit_concave_poly(samples, 4, 0.0, vmax);
        const CurveCapacity cap = estimate_capacity(curve);
        const double floor = curve.value(curve.v_max);
        const double target = floor + (cap.p_max - floor) * rng.uniform(0.0, 1.0);
        const double v = track_voltage(curve, target);
        CHECK(std::abs(curve.value(v) - target) <= 1e-8);
        CHECK(v >= cap.v_mpp - 1e-6);
        CHECK(v <= curve.v_max + 1e-12);
    }
}

TEST_CASE("concave fit: refitting samples from a fitted curve is idempotent") {
    PvArrayTruth array;
    array.v_oc = 40.0;
    array.v_max = 40.0;
    std::vector<std::pair<double, double>> samples;
    for (int i = 0; i < 10; ++i) {
        const double v = 20.0 + 20.0 * i / 9.0;
        samples.emplace_back(v, pv_power(array, v, 800.0));
    }
    const PvCurve first = fit_concave_poly(samples, 4, 20.0, 40.0);

    std::vector<std::pair<double, double>> regenerated;
    for (const auto& [v, p] : samples) {
        (void)p;
        regenerated.emplace_back(v, first.value(v));
    }
    const PvCurve second = fit_concave_poly(regenerated, 4, 20.0, 40.0);
    CHECK((first.beta - second.beta).lpNorm<Eigen::Infinity>() <= 1e-6);
}
