// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Criteria 1-7 exercise the numerical core against
// independent oracles; 8 and 9 run the bundled closed-loop scenario.

#include "dersec/box_ls.hpp"
#include "dersec/common.hpp"
#include "dersec/controller.hpp"
#include "dersec/network.hpp"
#include "dersec/pv_curve.hpp"
#include "dersec/pv_plant.hpp"
#include "dersec/scenario.hpp"
#include "dersec/sensitivity.hpp"
#include "dersec/steady_state.hpp"
#include "oracles.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

using namespace dersec;

namespace {

int failures = 0;

void report(int number, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", number,
                name.c_str(), detail.c_str());
    if (!pass)
        ++failures;
}

double elapsed_s(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
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

const std::string kDataDir = DERSEC_DATA_DIR;

// 1. Composition of the recursion equals the closed-form weighted problem.
void criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform(0.0, 4.0));  // 2..5
        const int nu = 2 * m;
        const int ny = 1 + static_cast<int>(rng.uniform(0.0, 5.0));
        const int len = 1 + static_cast<int>(rng.uniform(0.0, 100.0));
        const double lambda = rng.uniform(0.6, 1.0);
        const double rho1 = rng.uniform(10.0, 5000.0);
        const Eigen::MatrixXd s1 = random_matrix(rng, ny, nu);

        SensitivityEstimate est;
        est.S = s1;
        est.F = rho1 * Eigen::MatrixXd::Identity(nu, nu);
        est.lambda = lambda;
        std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> history;
        for (int k = 0; k < len; ++k) {
            history.emplace_back(random_vector(rng, nu), random_vector(rng, ny));
            rls_update(est, history.back().first, history.back().second);
        }
        const Eigen::MatrixXd batch = batch_ls(history, lambda, rho1, s1);
        worst = std::max(worst, (batch - est.S).lpNorm<Eigen::Infinity>());
    }
    const double dt = elapsed_s(t0);
    char detail[128];
    std::snprintf(detail, sizeof(detail), "max |rls - batch| = %.2e, %.2fs", worst, dt);
    report(1, "RLS/batch oracle equivalence", worst <= 1e-8 && dt < 5.0, detail);
}

// 2. The estimator recovers a noisy synthetic plant.
void criterion_2() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(200 + static_cast<std::uint64_t>(seed));
        const Eigen::MatrixXd s_true = random_matrix(rng, 5, 10);
        SensitivityEstimate est;
        est.S = Eigen::MatrixXd::Zero(5, 10);
        est.F = 1000.0 * Eigen::MatrixXd::Identity(10, 10);
        est.lambda = 0.85;
        for (int k = 0; k < 100; ++k) {
            const Eigen::VectorXd du = random_vector(rng, 10);
            Eigen::VectorXd dy = s_true * du;
            for (Eigen::Index i = 0; i < dy.size(); ++i)
                dy(i) += rng.gaussian(0.0, 1e-2);  // variance 1e-4
            rls_update(est, du, dy);
        }
        worst = std::max(worst, (est.S - s_true).norm() / s_true.norm());
    }
    const double dt = elapsed_s(t0);
    char detail[128];
    std::snprintf(detail, sizeof(detail), "worst rel error = %.3f%%, %.2fs", 100.0 * worst,
                  dt);
    report(2, "sensitivity recovery", worst <= 0.05 && dt < 5.0, detail);
}

// 3. KKT certificates on random box problems; objective vs grid oracle.
void criterion_3() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(303);
    double worst_kkt = 0.0;
    double worst_gap = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const int rows = 1 + static_cast<int>(rng.uniform(0.0, 8.0));
        const int cols = 1 + static_cast<int>(rng.uniform(0.0, 10.0));
        BoxLsProblem p;
        p.A = random_matrix(rng, rows, cols);
        p.b = random_vector(rng, rows);
        p.rho = (trial % 4 == 0) ? rng.uniform(0.0, 0.5) : 0.0;
        p.lower.resize(cols);
        p.upper.resize(cols);
        for (int c = 0; c < cols; ++c) {
            const double center = rng.uniform(-0.3, 0.3);
            const double width = rng.uniform(0.1, 1.0);
            p.lower(c) = center - width;
            p.upper(c) = center + width;
        }
        const BoxLsResult res = solve_box_ls(p);
        worst_kkt = std::max(worst_kkt, res.kkt_residual);

        if (trial < 20) {
            // Oracle compare on the first 20, limited to <= 5 variables to
            // keep the brute-force sweeps fast.
            BoxLsProblem small = p;
            if (cols > 5) {
                small.A = p.A.leftCols(5);
                small.lower = p.lower.head(5);
                small.upper = p.upper.head(5);
            }
            const BoxLsResult rs = solve_box_ls(small);
            const double oracle = testing::box_ls_grid_oracle(small);
            worst_gap = std::max(worst_gap, std::abs(rs.objective - oracle));
        }
    }
    const double dt = elapsed_s(t0);
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "max KKT residual = %.2e, max oracle gap = %.2e, %.2fs", worst_kkt,
                  worst_gap, dt);
    report(3, "box-constrained solve correctness",
           worst_kkt <= 1e-6 && worst_gap <= 1e-5 && dt < 30.0, detail);
}

// 4. Null-space perturbations never move the prediction and stay boxed.
void criterion_4() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(404);
    double worst_move = 0.0;
    bool contained = true;
    int active = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int rows = 1 + static_cast<int>(rng.uniform(0.0, 6.0));
        const int cols = rows + 1 + static_cast<int>(rng.uniform(0.0, 6.0));
        const Eigen::MatrixXd s = random_matrix(rng, rows, cols);
        Eigen::VectorXd lower(cols), upper(cols), phi(cols);
        for (int c = 0; c < cols; ++c) {
            lower(c) = -rng.uniform(0.05, 0.5);
            upper(c) = rng.uniform(0.05, 0.5);
            phi(c) = rng.uniform(lower(c), upper(c));
        }
        const auto [alpha, nu] = null_perturbation(s, phi, lower, upper, false, 0.05, rng);
        if (alpha != 0.0) {
            ++active;
            const Eigen::VectorXd moved = phi + alpha * nu;
            worst_move = std::max(worst_move, (s * moved - s * phi).norm());
            contained = contained && (moved.array() >= lower.array()).all() &&
                        (moved.array() <= upper.array()).all();
        }
    }
    const double dt = elapsed_s(t0);
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "active draws = %d/100, max |S(phi+an)-S phi| = %.2e, contained = %s, "
                  "%.2fs",
                  active, worst_move, contained ? "yes" : "no", dt);
    report(4, "null-space neutrality",
           active > 0 && worst_move <= 1e-9 && contained && dt < 5.0, detail);
}

// 5. Concave fits of the PV truth: residual, certificate, capacity.
void criterion_5() {
    const auto t0 = std::chrono::steady_clock::now();
    PvArrayTruth array;  // bundled defaults
    bool all_ok = true;
    double worst_rmse_frac = 0.0, worst_cap_frac = 0.0;
    for (int level = 0; level < 20; ++level) {
        const double g = 150.0 + 50.0 * level;  // 150..1100 W/m^2
        std::vector<std::pair<double, double>> samples;
        for (int i = 0; i < 10; ++i) {
            const double v = 20.0 + 20.0 * i / 9.0;
            samples.emplace_back(v, pv_power(array, v, g));
        }
        const PvCurve curve = fit_concave_poly(samples, 4, 20.0, 40.0);
        const PvCapacity truth = testing::pv_grid_oracle(array, g);
        const CurveCapacity cap = estimate_capacity(curve);
        worst_rmse_frac = std::max(worst_rmse_frac, curve.rmse / truth.p_max);
        worst_cap_frac =
            std::max(worst_cap_frac, std::abs(cap.p_max - truth.p_max) / truth.p_max);
        all_ok = all_ok && curve.concavity_certificate(512, 1e-9);
    }
    const double dt = elapsed_s(t0);
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "worst RMSE = %.2f%%, worst capacity error = %.2f%%, certificates %s, "
                  "%.2fs",
                  100.0 * worst_rmse_frac, 100.0 * worst_cap_frac,
                  all_ok ? "pass" : "fail", dt);
    report(5, "concave fit of the PV truth",
           worst_rmse_frac <= 0.02 && worst_cap_frac <= 0.03 && all_ok && dt < 10.0,
           detail);
}

// 6. Power tracking on random fitted curves.
void criterion_6() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(606);
    double worst = 0.0;
    bool side_ok = true;
    bool rejected_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        PvArrayTruth array;
        array.v_oc = rng.uniform(30.0, 50.0);
        array.v_max = array.v_oc;
        array.i_sc = rng.uniform(5.0, 10.0);
        array.p_base_w = rng.uniform(500.0, 1200.0);
        const double g = rng.uniform(300.0, 1100.0);
        const double lo = 0.5 * array.v_oc;
        std::vector<std::pair<double, double>> samples;
        for (int i = 0; i < 10; ++i) {
            const double v = lo + (array.v_oc - lo) * i / 9.0;
            samples.emplace_back(v, pv_power(array, v, g));
        }
        const PvCurve curve = fit_concave_poly(samples, 4, lo, array.v_oc);
        const CurveCapacity cap = estimate_capacity(curve);
        const double floor = std::max(curve.value(curve.v_max), 0.0);
        const double target = floor + (cap.p_max - floor) * rng.uniform(0.0, 1.0);
        const double v_star = track_voltage(curve, target);
        worst = std::max(worst, std::abs(curve.value(v_star) - target));
        side_ok = side_ok && v_star >= cap.v_mpp - 1e-9 && v_star <= curve.v_max + 1e-12;
        try {
            track_voltage(curve, cap.p_max * 1.05 + 0.01);
            rejected_ok = false;
        } catch (const InfeasibleError&) {
        }
    }
    const double dt = elapsed_s(t0);
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "max |c(v*) - target| = %.2e, side %s, infeasible rejected %s, %.2fs",
                  worst, side_ok ? "ok" : "bad", rejected_ok ? "yes" : "no", dt);
    report(6, "PV power tracking", worst <= 1e-8 && side_ok && rejected_ok && dt < 5.0,
           detail);
}

// 7. Droop physics on the two-inverter toy network.
void criterion_7() {
    const auto t0 = std::chrono::steady_clock::now();
    const char* twin = R"(
nominal_hz = 60
[bus]
1  0.0  0.0  0.0
2  0.0  0.0  0.0
3  0.8  0.0  0.0
[branch]
1  3  0.0  0.15  0.0  1.0  0
2  3  0.0  0.15  0.0  1.0  0
[der]
1  gfm  1
2  gfm  2
[gfm]
1  1.0  0.1  0.05  0.4  0.05
2  1.0  0.1  0.05  0.4  0.05
[critical]
buses = 3
lines = 1-3
)";
    const NetworkModel model = load_network(twin);
    Eigen::VectorXd u(4);
    u << 0.4, 0.4, 0.05, 0.05;
    const Eigen::VectorXd avail = Eigen::VectorXd::Zero(2);
    const double r_eq = hz_to_rad(0.1) / 2.0;

    Rng rng(707);
    LoadSet loads = model.nominal_loads();
    OperatingPoint point = solve_steady_state(model, u, loads, avail);
    double worst_droop = 0.0, worst_balance = 0.0;
    for (int step = 0; step < 100; ++step) {
        LoadSet next = loads;
        next.p(2) = 0.8 + rng.uniform(-0.25, 0.25);
        const OperatingPoint moved = solve_steady_state(model, u, next, avail, &point);
        const double dp = next.p(2) - loads.p(2);
        worst_droop =
            std::max(worst_droop, std::abs((moved.omega - point.omega) + r_eq * dp));
        worst_balance =
            std::max(worst_balance, power_balance_residual(model, moved, u, next, avail));
        worst_balance = std::max(worst_balance, moved.max_mismatch);
        point = moved;
        loads = next;
    }
    const double dt = elapsed_s(t0);
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "max droop error = %.2e rad/s, max balance residual = %.2e, %.2fs",
                  worst_droop, worst_balance, dt);
    report(7, "droop physics on the twin toy",
           worst_droop <= 1e-3 && worst_balance <= 1e-8 && dt < 5.0, detail);
}

// 8. Closed-loop regulation statistics on the bundled case.
void criterion_8() {
    const auto t0 = std::chrono::steady_clock::now();
    Scenario base = load_scenario_file(kDataDir + "/ieee14_default.scn");
    base.algorithm = Algorithm::Alg2;
    base.duration_s = 400.0;

    struct SeedStats {
        double improved = 0.0, under10 = 0.0, pe_floor = 0.0, flow_max = 0.0;
    };
    std::vector<SeedStats> stats(10);
    std::vector<std::thread> pool;
    for (int s = 0; s < 10; ++s) {
        pool.emplace_back([&stats, base, s]() {
            Scenario sc = base;
            sc.seed = static_cast<std::uint64_t>(1 + s);
            const RunLog log = run_scenario(sc);
            const Summary sum = summarize(log);
            stats[static_cast<std::size_t>(s)] = {sum.cycle_improvement_fraction,
                                                  sum.channels.at(0).frac_under_10,
                                                  sum.pe_lambda_min_floor,
                                                  sum.flow_cycle_end_max};
        });
    }
    for (auto& th : pool)
        th.join();

    double min_improved = 1.0, min_under10 = 1.0, min_floor = 1e300, max_flow = 0.0;
    for (const SeedStats& st : stats) {
        min_improved = std::min(min_improved, st.improved);
        min_under10 = std::min(min_under10, st.under10);
        min_floor = std::min(min_floor, st.pe_floor);
        max_flow = std::max(max_flow, st.flow_max);
    }
    const double dt = elapsed_s(t0);
    char detail[220];
    std::snprintf(detail, sizeof(detail),
                  "min cycle improvement = %.0f%%, min freq under-10%% = %.1f%%, min PE "
                  "floor = %.1e, max cycle-end flow = %.3f pu, %.1fs",
                  100.0 * min_improved, 100.0 * min_under10, min_floor, max_flow, dt);
    report(8, "closed-loop regulation (10 seeds, 400 s, alg2)",
           min_improved >= 0.80 && min_under10 >= 0.70 && min_floor > 0.0 &&
               max_flow <= 0.32 && dt < 180.0,
           detail);
}

// 9. Fixed seeds reproduce byte-identical run logs.
void criterion_9() {
    const auto t0 = std::chrono::steady_clock::now();
    Scenario sc = load_scenario_file(kDataDir + "/ieee14_default.scn");
    sc.duration_s = 60.0;
    sc.seed = 42;
    const std::string a = run_log_to_jsonl(run_scenario(sc));
    const std::string b = run_log_to_jsonl(run_scenario(sc));
    const double dt = elapsed_s(t0);
    char detail[96];
    std::snprintf(detail, sizeof(detail), "%zu bytes, identical = %s, %.2fs", a.size(),
                  a == b ? "yes" : "no", dt);
    report(9, "determinism of seeded runs", !a.empty() && a == b && dt < 60.0, detail);
}

} // namespace

int main() {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
    if (failures == 0)
        std::printf("all acceptance criteria passed\n");
    else
        std::printf("%d acceptance criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
