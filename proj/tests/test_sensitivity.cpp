#include <doctest.h>

#include "dersec/common.hpp"
#include "dersec/network.hpp"
#include "dersec/sensitivity.hpp"

#include <Eigen/Dense>

#include <vector>

using namespace dersec;

namespace {

SensitivityEstimate two_gfm_toy() {
    Eigen::Vector2d rf(0.01, 0.01);
    Eigen::Vector2d rv(0.05, 0.05);
    return init_sensitivity(rf, rv, {true, true}, 1, 1, 0.85, 1000.0);
}

Eigen::VectorXd random_vector(Rng& rng, Eigen::Index n, double scale = 1.0) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i)
        v(i) = rng.uniform(-scale, scale);
    return v;
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j)
            m(i, j) = rng.uniform(-1.0, 1.0);
    return m;
}

} // namespace

TEST_CASE("init: two equal frequency droops combine in parallel") {
    const SensitivityEstimate est = two_gfm_toy();
    REQUIRE(est.S.rows() == 3);  // freq + 1 voltage + 1 flow
    REQUIRE(est.S.cols() == 4);
    CHECK(est.S(0, 0) == doctest::Approx(0.005).epsilon(1e-12));
    CHECK(est.S(0, 1) == doctest::Approx(0.005).epsilon(1e-12));
    CHECK(est.S(0, 2) == 0.0);
    CHECK(est.S(0, 3) == 0.0);
    // Voltage row couples through reactive columns only.
    CHECK(est.S(1, 0) == 0.0);
    CHECK(est.S(1, 2) == doctest::Approx(0.025).epsilon(1e-12));
    // Flow rows start at zero.
    CHECK(est.S.row(2).norm() == 0.0);
    CHECK((est.F - 1000.0 * Eigen::MatrixXd::Identity(4, 4)).norm() == 0.0);
}

TEST_CASE("init: a system without grid-forming units is rejected") {
    Eigen::Vector2d rf(0.01, 0.01), rv(0.05, 0.05);
    CHECK_THROWS_AS(init_sensitivity(rf, rv, {false, false}, 1, 0, 0.85, 1000.0), Error);
}

TEST_CASE("init: bundled case zeroes the PV columns everywhere") {
    const NetworkModel model =
        load_network_file(std::string(DERSEC_DATA_DIR) + "/ieee14.case");
    const SensitivityEstimate est = init_sensitivity(model, 0.85, 1000.0);
    REQUIRE(est.S.cols() == 10);
    const std::vector<int> pv = model.pv_der_indices();
    REQUIRE(pv == std::vector<int>{0, 4});
    for (int idx : pv) {
        CHECK(est.S.col(idx).norm() == 0.0);
        CHECK(est.S.col(idx + 5).norm() == 0.0);
    }
    // Frequency row is in Hz per pu: parallel combination of the case droops.
    const double rf_eq_hz = 1.0 / (1.0 / 1.2 + 1.0 / 1.2 + 1.0 / 1.5);
    CHECK(est.S(0, 1) == doctest::Approx(rf_eq_hz).epsilon(1e-12));
}

TEST_CASE("rls: zero regressor leaves the estimate and scales the covariance") {
    SensitivityEstimate est = two_gfm_toy();
    const Eigen::MatrixXd s_before = est.S;
    const Eigen::MatrixXd f_before = est.F;
    rls_update(est, Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(3));
    CHECK((est.S - s_before).norm() == 0.0);
    CHECK((est.F - f_before / 0.85).norm() <= 1e-9);
}

TEST_CASE("rls: scalar step reproduces the hand-evaluated gain") {
    SensitivityEstimate est;
    est.S = Eigen::MatrixXd::Zero(1, 1);
    est.F = Eigen::MatrixXd::Constant(1, 1, 1000.0);
    est.lambda = 1.0;
    est.rho1 = 1000.0;
    Eigen::VectorXd du(1), dy(1);
    du << 1.0;
    dy << 2.0;
    rls_update(est, du, dy);
    // H = 1000/1001, S' = 2*1000/1001.
    CHECK(est.S(0, 0) == doctest::Approx(2000.0 / 1001.0).epsilon(1e-12));
    CHECK(est.F(0, 0) == doctest::Approx(1000.0 / 1001.0).epsilon(1e-9));
}

TEST_CASE("rls: recovers a synthetic plant from exciting data") {
    Rng rng(5);
    const Eigen::MatrixXd s_true = random_matrix(rng, 3, 6);
    SensitivityEstimate est;
    est.S = Eigen::MatrixXd::Zero(3, 6);
    est.F = 1000.0 * Eigen::MatrixXd::Identity(6, 6);
    est.lambda = 0.85;
    for (int k = 0; k < 50; ++k) {
        const Eigen::VectorXd du = random_vector(rng, 6);
        rls_update(est, du, s_true * du);
    }
    CHECK((est.S - s_true).norm() / s_true.norm() <= 0.01);
}

TEST_CASE("rls: non-finite inputs are rejected") {
    SensitivityEstimate est = two_gfm_toy();
    Eigen::VectorXd du = Eigen::VectorXd::Zero(4);
    du(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(rls_update(est, du, Eigen::VectorXd::Zero(3)), Error);
}

TEST_CASE("batch: one consistent sample with a weak prior fits along the regressor") {
    Eigen::VectorXd du(2), dy(1);
    du << 2.0, 1.0;
    dy << 3.0;
    const Eigen::MatrixXd s =
        batch_ls({{du, dy}}, 0.9, 1e9, Eigen::MatrixXd::Zero(1, 2));
    CHECK(std::abs((s * du)(0) - 3.0) <= 1e-6);
}

TEST_CASE("batch: orthogonal samples under lambda=1 carry the stated prior bias") {
    Eigen::VectorXd u1(2), u2(2), y1(1), y2(1);
    u1 << 1.0, 0.0;
    u2 << 0.0, 1.0;
    y1 << 1.7;
    y2 << -0.6;
    const double rho1 = 500.0;
    const Eigen::MatrixXd s =
        batch_ls({{u1, y1}, {u2, y2}}, 1.0, rho1, Eigen::MatrixXd::Zero(1, 2));
    // Normal equations give s_i = y_i / (1 + 1/rho1), so |s_i - y_i| <= 2/rho1.
    CHECK(s(0, 0) == doctest::Approx(1.7 / (1.0 + 1.0 / rho1)).epsilon(1e-12));
    CHECK(s(0, 1) == doctest::Approx(-0.6 / (1.0 + 1.0 / rho1)).epsilon(1e-12));
    CHECK(std::abs(s(0, 0) - 1.7) <= 2.0 / rho1);
    CHECK(std::abs(s(0, 1) + 0.6) <= 2.0 / rho1);
}

TEST_CASE("batch equals the recursion elementwise over random histories") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const int m2 = 2 * (2 + static_cast<int>(rng.uniform(0.0, 4.0)));
        const int ny = 1 + static_cast<int>(rng.uniform(0.0, 5.0));
        const int len = 1 + static_cast<int>(rng.uniform(0.0, 100.0));
        const double lambda = rng.uniform(0.7, 1.0);
        const double rho1 = rng.uniform(10.0, 2000.0);
        const Eigen::MatrixXd s1 = random_matrix(rng, ny, m2);

        SensitivityEstimate est;
        est.S = s1;
        est.F = rho1 * Eigen::MatrixXd::Identity(m2, m2);
        est.lambda = lambda;
        est.rho1 = rho1;

        std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> history;
        for (int k = 0; k < len; ++k) {
            history.emplace_back(random_vector(rng, m2), random_vector(rng, ny));
            rls_update(est, history.back().first, history.back().second);
        }
        const Eigen::MatrixXd batch = batch_ls(history, lambda, rho1, s1);
        CHECK((batch - est.S).lpNorm<Eigen::Infinity>() <= 1e-8);
    }
}

TEST_CASE("rls: covariance stays positive definite across many updates") {
    Rng rng(9);
    SensitivityEstimate est;
    est.S = Eigen::MatrixXd::Zero(2, 4);
    est.F = 1000.0 * Eigen::MatrixXd::Identity(4, 4);
    est.lambda = 0.9;
    for (int k = 0; k < 10000; ++k) {
        rls_update(est, random_vector(rng, 4), random_vector(rng, 2));
        if (k % 500 == 0) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(est.F);
            CHECK(eig.eigenvalues().minCoeff() > 0.0);
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(est.F);
    CHECK(eig.eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("rls: noiseless estimation error decays toward the prior-bias floor") {
    // The error is exactly (S1 - S_true)(I + rho1 W_k)^-1 with W_k a growing
    // PSD sum, which decays geometrically but admits sub-percent transient
    // upticks (matrix squaring is not operator monotone). Assert the decay
    // coarse-grained and bound the per-step uptick.
    Rng rng(31);
    const Eigen::MatrixXd s_true = random_matrix(rng, 2, 4);
    SensitivityEstimate est;
    est.S = Eigen::MatrixXd::Zero(2, 4);
    est.F = 1000.0 * Eigen::MatrixXd::Identity(4, 4);
    est.lambda = 0.85;
    std::vector<double> errs;
    for (int k = 0; k < 200; ++k) {
        const Eigen::VectorXd du = random_vector(rng, 4);
        rls_update(est, du, s_true * du);
        errs.push_back((est.S - s_true).norm());
        if (k >= 4 && errs[k] > 1e-13)
            CHECK(errs[k] <= errs[k - 1] * 1.02);
    }
    for (std::size_t k = 14; k < errs.size(); k += 10)
        if (errs[k - 10] > 1e-13)
            CHECK(errs[k] < errs[k - 10]);
    CHECK(errs.back() <= 1e-8 * errs.front());
}

TEST_CASE("predict: zero, identity, and droop-initialized estimates") {
    SensitivityEstimate zero;
    zero.S = Eigen::MatrixXd::Zero(2, 3);
    zero.F = Eigen::MatrixXd::Identity(3, 3);
    CHECK(predict(zero, Eigen::Vector3d(1.0, 2.0, 3.0)).norm() == 0.0);

    SensitivityEstimate ident;
    ident.S = Eigen::MatrixXd::Identity(3, 3);
    ident.F = Eigen::MatrixXd::Identity(3, 3);
    const Eigen::Vector3d du(0.5, -1.0, 2.0);
    CHECK((predict(ident, du) - du).norm() == 0.0);

    const SensitivityEstimate droop = two_gfm_toy();
    Eigen::VectorXd step(4);
    step << 0.1, 0.1, 0.0, 0.0;
    CHECK(predict(droop, step)(0) == doctest::Approx(0.005 * 0.2).epsilon(1e-12));
}

TEST_CASE("pe check: rank deficiency, warm-up, and a cycling basis") {
    PeMonitor mon(3, 6, 1e-4, 1e4);

    // Warm-up returns false even for rich directions.
    mon.push(Eigen::Vector3d(1.0, 0.0, 0.0));
    CHECK_FALSE(mon.is_pe());

    // A constant repeated vector never excites: Gram is rank one.
    PeMonitor flat(3, 4, 1e-4, 1e4);
    for (int i = 0; i < 10; ++i)
        flat.push(Eigen::Vector3d(0.3, 0.3, 0.0));
    CHECK_FALSE(flat.is_pe());
    CHECK(flat.gram_eigen_range().first <= 1e-12);

    // Cycling the scaled standard basis fills all directions.
    PeMonitor cyc(3, 6, 1e-4, 1e4);
    const double c = 0.5;
    for (int i = 0; i < 12; ++i) {
        Eigen::Vector3d v = Eigen::Vector3d::Zero();
        v(i % 3) = c;
        cyc.push(v);
    }
    CHECK(cyc.is_pe());
    CHECK(cyc.gram_eigen_range().first >= c * c - 1e-12);
}

TEST_CASE("pe check: the gram window is permutation invariant") {
    Rng rng(77);
    std::vector<Eigen::VectorXd> window;
    for (int i = 0; i < 7; ++i)
        window.push_back(random_vector(rng, 3));

    PeMonitor fwd(3, 6, 1e-4, 1e4), rev(3, 6, 1e-4, 1e4);
    for (const auto& v : window)
        fwd.push(v);
    for (auto it = window.rbegin(); it != window.rend(); ++it)
        rev.push(*it);
    const auto [f_lo, f_hi] = fwd.gram_eigen_range();
    const auto [r_lo, r_hi] = rev.gram_eigen_range();
    CHECK(f_lo == doctest::Approx(r_lo).epsilon(1e-12));
    CHECK(f_hi == doctest::Approx(r_hi).epsilon(1e-12));
    CHECK(fwd.is_pe() == rev.is_pe());
}
