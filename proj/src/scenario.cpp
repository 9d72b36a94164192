#include "dersec/scenario.hpp"

#include "dersec/common.hpp"
#include "case_text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

namespace dersec {

namespace fs = std::filesystem;
using nlohmann::json;
using detail::parse_int;
using detail::parse_number;

std::string algorithm_name(Algorithm a) {
    switch (a) {
    case Algorithm::Alg1: return "alg1";
    case Algorithm::Alg2: return "alg2";
    case Algorithm::Additive: return "additive";
    }
    return "alg1";
}

Algorithm algorithm_from_name(const std::string& name) {
    if (name == "alg1")
        return Algorithm::Alg1;
    if (name == "alg2")
        return Algorithm::Alg2;
    if (name == "additive")
        return Algorithm::Additive;
    throw ParseError("unknown algorithm '" + name + "' (expected alg1|alg2|additive)");
}

void Scenario::validate() const {
    if (duration_s <= 0.0)
        throw Error("scenario: duration must be positive");
    if (control_period_s <= 0.0 || perturb_period_s <= 0.0)
        throw Error("scenario: periods must be positive");
    const double ratio = perturb_period_s / control_period_s;
    if (std::abs(ratio - std::round(ratio)) > 1e-9)
        throw Error("scenario: control period must divide the perturbation period");
    if (perturb_magnitude < 0.0 || perturb_magnitude >= 1.0)
        throw Error("scenario: perturbation magnitude must lie in [0, 1)");
    if (du_min > 0.0 || du_max < 0.0 || du_min >= du_max)
        throw Error("scenario: setpoint adjustment bounds must straddle zero");
    if (pv_degree < 1 || pv_fit_window < pv_degree)
        throw Error("scenario: PV fit window must be at least the degree");
    if (threshold_freq_hz <= 0.0 || threshold_v <= 0.0 || threshold_flow <= 0.0)
        throw Error("scenario: measurement thresholds must be positive");
}

Scenario load_scenario(const std::string& text, const std::string& base_dir) {
    const detail::CaseDocument doc = detail::tokenize_case(text);
    Scenario sc;

    auto top = [&](const char* key, double fallback) {
        const auto it = doc.scalars.find(key);
        return it == doc.scalars.end() ? fallback : parse_number(it->second, key);
    };
    auto section = [&](const char* sec, const char* key, double fallback) {
        const std::string raw = doc.section_or(sec, key, "");
        return raw.empty() ? fallback : parse_number(raw, key);
    };

    sc.name = doc.scalar_or("name", "scenario");
    const std::string case_rel = doc.scalar_or("case", "");
    if (case_rel.empty())
        throw ParseError("scenario: missing 'case' path");
    sc.case_path = (fs::path(base_dir) / case_rel).string();
    const std::string irr_rel = doc.scalar_or("irradiance", "");
    if (!irr_rel.empty())
        sc.irradiance_path = (fs::path(base_dir) / irr_rel).string();

    sc.duration_s = top("duration_s", sc.duration_s);
    sc.perturb_period_s = top("perturb_period_s", sc.perturb_period_s);
    sc.control_period_s = top("control_period_s", sc.control_period_s);
    sc.perturb_magnitude = top("perturb_magnitude", sc.perturb_magnitude);
    sc.seed = static_cast<std::uint64_t>(top("seed", static_cast<double>(sc.seed)));
    sc.algorithm = algorithm_from_name(doc.scalar_or("algorithm", "alg2"));

    sc.rho = section("controller", "rho", sc.rho);
    sc.a1 = section("controller", "a1", sc.a1);
    sc.a2 = section("controller", "a2", sc.a2);
    sc.a3 = section("controller", "a3", sc.a3);
    sc.alpha_max = section("controller", "alpha_max", sc.alpha_max);
    sc.additive_noise = section("controller", "additive_noise", sc.additive_noise);
    sc.du_min = section("controller", "du_min", sc.du_min);
    sc.du_max = section("controller", "du_max", sc.du_max);
    sc.flow_two_sided = section("controller", "flow_two_sided", 0.0) != 0.0;

    sc.lambda = section("estimator", "lambda", sc.lambda);
    sc.rho1 = section("estimator", "rho1", sc.rho1);
    sc.pe_window = static_cast<int>(section("estimator", "pe_window", sc.pe_window));
    sc.pe_rho_lower = section("estimator", "pe_rho_lower", sc.pe_rho_lower);
    sc.pe_rho_upper = section("estimator", "pe_rho_upper", sc.pe_rho_upper);

    sc.pv_degree = static_cast<int>(section("pvfit", "degree", sc.pv_degree));
    sc.pv_fit_window = static_cast<int>(section("pvfit", "window", sc.pv_fit_window));

    sc.threshold_freq_hz = section("measurement", "threshold_freq_hz", sc.threshold_freq_hz);
    sc.threshold_v = section("measurement", "threshold_v", sc.threshold_v);
    sc.threshold_flow = section("measurement", "threshold_flow", sc.threshold_flow);
    sc.noise_freq_hz = section("measurement", "noise_freq_hz", sc.noise_freq_hz);
    sc.noise_v = section("measurement", "noise_v", sc.noise_v);
    sc.noise_flow = section("measurement", "noise_flow", sc.noise_flow);

    if (const auto it = doc.tables.find("pv"); it != doc.tables.end()) {
        for (const auto& row : it->second) {
            if (row.size() != 9)
                throw ParseError("scenario: [pv] rows need 9 columns "
                                 "(der voc isc i0 pbase_w gref vmin vmax site)");
            PvSite site;
            site.der_index = parse_int(row[0], "pv der") - 1;
            site.array.v_oc = parse_number(row[1], "pv voc");
            site.array.i_sc = parse_number(row[2], "pv isc");
            site.array.i_0 = parse_number(row[3], "pv i0");
            site.array.p_base_w = parse_number(row[4], "pv pbase_w");
            site.array.g_ref = parse_number(row[5], "pv gref");
            site.array.v_min = 0.0;
            site.array.v_max = site.array.v_oc;
            site.fit_v_min = parse_number(row[6], "pv vmin");
            site.fit_v_max = parse_number(row[7], "pv vmax");
            site.trace_site = static_cast<std::size_t>(parse_int(row[8], "pv site") - 1);
            if (!(site.fit_v_min < site.fit_v_max) || site.fit_v_max > site.array.v_max)
                throw ParseError("scenario: PV voltage window must lie inside [0, voc]");
            sc.pv_sites.push_back(site);
        }
    }

    sc.validate();
    return sc;
}

Scenario load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ParseError("scenario: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return load_scenario(buf.str(), fs::path(path).parent_path().string());
}

Eigen::VectorXd prediction_error(const Eigen::VectorXd& dy, const Eigen::VectorXd& dy_hat,
                                 const Eigen::VectorXd& thresholds) {
    if (dy.size() != dy_hat.size() || dy.size() != thresholds.size())
        throw Error("prediction_error: length mismatch");
    if ((thresholds.array() <= 0.0).any())
        throw Error("prediction_error: thresholds must be positive");
    Eigen::VectorXd e(dy.size());
    for (Eigen::Index i = 0; i < dy.size(); ++i)
        e(i) = std::abs(dy(i) - dy_hat(i)) / std::max(std::abs(dy(i)), thresholds(i)) * 100.0;
    return e;
}

namespace {

struct PvRuntime {
    PvSite site;
    std::deque<std::pair<double, double>> samples;  // (v, p)
    std::optional<PvCurve> curve;
    double v_applied = 0.0;
    int probe_index = 0;
};

double probe_voltage(const PvSite& site, int index, int window) {
    const double f = 0.35 + 0.64 * static_cast<double>(index % (window + 1)) /
                                static_cast<double>(window);
    return site.fit_v_min + f * (site.fit_v_max - site.fit_v_min);
}

Eigen::VectorXd effective_error(const Eigen::VectorXd& y, const Eigen::VectorXd& target,
                                const std::vector<std::string>& modes) {
    Eigen::VectorXd err = target - y;
    for (Eigen::Index i = 0; i < err.size(); ++i)
        if (modes[static_cast<std::size_t>(i)] == "limit")
            err(i) = std::min(0.0, err(i));
    return err;
}

} // namespace

RunLog run_scenario(const Scenario& scenario) {
    scenario.validate();
    const NetworkModel model = load_network_file(scenario.case_path);

    std::optional<IrradianceTrace> trace;
    if (!scenario.irradiance_path.empty())
        trace = load_irradiance_file(scenario.irradiance_path);

    // PV sites must match the model's GFL units one to one.
    const std::vector<int> pv_ders = model.pv_der_indices();
    std::vector<PvRuntime> pvs;
    for (int der : pv_ders) {
        const auto it = std::find_if(scenario.pv_sites.begin(), scenario.pv_sites.end(),
                                     [&](const PvSite& s) { return s.der_index == der; });
        if (it == scenario.pv_sites.end())
            throw Error("scenario: no [pv] entry for GFL DER " + std::to_string(der + 1));
        if (trace && it->trace_site >= trace->site_count())
            throw Error("scenario: PV trace site out of range");
        if (!trace)
            throw Error("scenario: PV units require an irradiance trace");
        pvs.push_back(PvRuntime{*it, {}, std::nullopt, 0.0, 0});
    }

    const int m = model.der_count();
    const Eigen::Index ny = model.output_dim();

    ControllerConfig config;
    config.rho = scenario.rho;
    config.a1 = scenario.a1;
    config.a2 = scenario.a2;
    config.a3 = scenario.a3;
    config.alpha_max = scenario.alpha_max;
    config.additive_noise = scenario.additive_noise;
    config.du_lower = Eigen::VectorXd::Constant(2 * m, scenario.du_min);
    config.du_upper = Eigen::VectorXd::Constant(2 * m, scenario.du_max);
    config.y_target = model.output_targets();
    config.channel_modes.assign(static_cast<std::size_t>(ny), ChannelMode::Track);
    for (std::size_t i = 0; i < model.critical_lines.size(); ++i)
        config.channel_modes[1 + model.critical_buses.size() + i] =
            scenario.flow_two_sided ? ChannelMode::Track : ChannelMode::UpperLimit;
    config.pv_inputs = pv_ders;

    PeConfig pe;
    pe.window = scenario.pe_window;
    pe.rho_lower = scenario.pe_rho_lower;
    pe.rho_upper = scenario.pe_rho_upper;

    SecondaryController controller(init_sensitivity(model, scenario.lambda, scenario.rho1),
                                   config, pe);

    Rng rng(scenario.seed);

    Eigen::VectorXd thresholds(ny);
    thresholds(0) = scenario.threshold_freq_hz;
    for (std::size_t i = 0; i < model.critical_buses.size(); ++i)
        thresholds(1 + static_cast<Eigen::Index>(i)) = scenario.threshold_v;
    for (std::size_t i = 0; i < model.critical_lines.size(); ++i)
        thresholds(1 + static_cast<Eigen::Index>(model.critical_buses.size() + i)) =
            scenario.threshold_flow;

    const bool with_noise = scenario.noise_freq_hz > 0.0 || scenario.noise_v > 0.0 ||
                            scenario.noise_flow > 0.0;
    Eigen::VectorXd noise_std(ny);
    noise_std(0) = scenario.noise_freq_hz;
    for (Eigen::Index i = 1; i <= static_cast<Eigen::Index>(model.critical_buses.size()); ++i)
        noise_std(i) = scenario.noise_v;
    for (Eigen::Index i = 1 + static_cast<Eigen::Index>(model.critical_buses.size());
         i < ny; ++i)
        noise_std(i) = scenario.noise_flow;

    auto measure = [&](const OperatingPoint& point) {
        return measure_output(model, point, with_noise ? &noise_std : nullptr,
                              with_noise ? &rng : nullptr);
    };

    // PV actuation: availability per DER slot at the currently applied
    // voltage (alg2) or the true maximum power point (alg1 / additive).
    const bool voltage_mode = scenario.algorithm == Algorithm::Alg2;
    auto pv_availability = [&](double t) {
        Eigen::VectorXd avail = Eigen::VectorXd::Zero(m);
        for (auto& pv : pvs) {
            const double g = trace->at(t, pv.site.trace_site);
            if (voltage_mode)
                avail(pv.site.der_index) = pv_power(pv.site.array, pv.v_applied, g);
            else
                avail(pv.site.der_index) = true_capacity(pv.site.array, g).p_max;
        }
        return avail;
    };

    const LoadSet base_loads = model.nominal_loads();
    LoadSet loads = base_loads;
    Eigen::VectorXd u = model.initial_setpoints;

    // Initial settle at t = 0: PVs start at their true maximum power point,
    // with a first power-voltage characteristic fitted from a commissioning
    // sweep across the voltage window at the starting irradiance.
    for (auto& pv : pvs) {
        const double g = trace ? trace->at(0.0, pv.site.trace_site) : 0.0;
        pv.v_applied = trace ? true_capacity(pv.site.array, g).v_mpp : pv.site.fit_v_max;
        if (!trace || g <= 0.0)
            continue;
        for (int j = 0; j <= scenario.pv_fit_window; ++j) {
            const double f =
                0.05 + 0.94 * static_cast<double>(j) / scenario.pv_fit_window;
            const double v =
                pv.site.fit_v_min + f * (pv.site.fit_v_max - pv.site.fit_v_min);
            pv.samples.emplace_back(v, pv_power(pv.site.array, v, g));
        }
        try {
            pv.curve = fit_concave_poly(
                std::vector<std::pair<double, double>>(pv.samples.begin(),
                                                       pv.samples.end()),
                scenario.pv_degree, pv.site.fit_v_min, pv.site.fit_v_max);
        } catch (const Error&) {
            pv.curve.reset();  // falls back to the online probe sweep
        }
    }
    Eigen::VectorXd avail = Eigen::VectorXd::Zero(m);
    if (trace) {
        for (auto& pv : pvs) {
            const double g = trace->at(0.0, pv.site.trace_site);
            avail(pv.site.der_index) = true_capacity(pv.site.array, g).p_max;
        }
    }
    Eigen::VectorXd solver_u0 = u;
    if (voltage_mode)
        for (const auto& pv : pvs)
            solver_u0(pv.site.der_index) = avail(pv.site.der_index);
    OperatingPoint point = solve_steady_state(model, solver_u0, loads, avail, nullptr);
    for (const auto& pv : pvs)
        u(pv.site.der_index) = point.der_p(pv.site.der_index);
    SystemOutput y0 = measure(point);
    Eigen::VectorXd y_prev = y0.as_vector();

    RunLog log;
    log.scenario_name = scenario.name;
    log.algorithm = algorithm_name(scenario.algorithm);
    log.seed = scenario.seed;
    log.y_target = config.y_target;
    log.y0 = y_prev;
    log.channel_names.push_back("freq_hz");
    for (int b : model.critical_buses)
        log.channel_names.push_back("v_" + std::to_string(model.buses[static_cast<std::size_t>(b)].id));
    for (int l : model.critical_lines) {
        const Branch& br = model.branches[static_cast<std::size_t>(l)];
        log.channel_names.push_back(
            "p_" + std::to_string(model.buses[static_cast<std::size_t>(br.from)].id) + "_" +
            std::to_string(model.buses[static_cast<std::size_t>(br.to)].id));
    }
    for (Eigen::Index i = 0; i < ny; ++i)
        log.channel_modes.push_back(
            config.channel_modes[static_cast<std::size_t>(i)] == ChannelMode::Track
                ? "track"
                : "limit");

    const long ratio = std::lround(scenario.perturb_period_s / scenario.control_period_s);
    const long n_events =
        static_cast<long>(std::floor(scenario.duration_s / scenario.control_period_s + 1e-9));

    long k = 0;
    double current_t = 0.0;
    try {
    for (long e = 1; e <= n_events; ++e) {
        const double t = static_cast<double>(e) * scenario.control_period_s;
        current_t = t;
        EventRecord rec;
        rec.t = t;

        if (e % ratio == 0) {
            // Perturbation instant: loads move, no control action.
            loads = perturb_loads(base_loads, scenario.perturb_magnitude, rng);
            avail = pv_availability(t);
            Eigen::VectorXd solver_u = u;
            if (voltage_mode)
                for (const auto& pv : pvs)
                    solver_u(pv.site.der_index) = avail(pv.site.der_index);
            point = solve_steady_state(model, solver_u, loads, avail, &point);
            SystemOutput out = measure(point);
            out.k = -1;
            rec.is_control = false;
            rec.k = -1;
            rec.y = out.as_vector();
            y_prev = rec.y;
            log.events.push_back(std::move(rec));
            continue;
        }

        ++k;
        // Refit PV curves on the sliding sample windows (alg2 only). The fit
        // domain follows the sampled voltage span (with a small margin) so
        // the capacity estimate and voltage commands never rely on the
        // polynomial's extrapolation into unsampled regions.
        if (scenario.algorithm == Algorithm::Alg2) {
            for (auto& pv : pvs) {
                if (static_cast<int>(pv.samples.size()) >= scenario.pv_fit_window + 1) {
                    std::vector<std::pair<double, double>> window(pv.samples.begin(),
                                                                  pv.samples.end());
                    double v_lo = window.front().first, v_hi = v_lo;
                    for (const auto& [v, p] : window) {
                        (void)p;
                        v_lo = std::min(v_lo, v);
                        v_hi = std::max(v_hi, v);
                    }
                    // A fit is only identifiable with real voltage spread;
                    // narrow windows keep the previous curve.
                    if (v_hi - v_lo >=
                        0.05 * (pv.site.fit_v_max - pv.site.fit_v_min)) {
                        const double margin = 0.08 * (v_hi - v_lo);
                        v_lo = std::max(pv.site.fit_v_min, v_lo - margin);
                        v_hi = std::min(pv.site.fit_v_max, v_hi + margin);
                        try {
                            pv.curve =
                                fit_concave_poly(window, scenario.pv_degree, v_lo, v_hi);
                        } catch (const Error&) {
                            // Degenerate window: keep the previous curve.
                        }
                    }
                }
                // Irradiance scales the whole characteristic, so pinning the
                // curve level to the newest measured point compensates the
                // sliding window's lag between refits.
                if (pv.curve.has_value()) {
                    const double modeled = pv.curve->value(pv.v_applied);
                    const double measured = point.der_p(pv.site.der_index);
                    if (modeled > 0.02 && measured > 0.0) {
                        const double scale =
                            std::clamp(measured / modeled, 0.7, 1.3);
                        pv.curve->beta *= scale;
                    }
                }
            }
        }

        const Eigen::VectorXd pv_p_before = point.der_p;
        ControlStep step;
        if (scenario.algorithm == Algorithm::Alg2) {
            std::vector<std::optional<PvCurve>> curves;
            Eigen::VectorXd p_pv_prev(static_cast<Eigen::Index>(pvs.size()));
            for (std::size_t j = 0; j < pvs.size(); ++j) {
                curves.push_back(pvs[j].curve);
                p_pv_prev(static_cast<Eigen::Index>(j)) =
                    std::max(0.0, point.der_p(pvs[j].site.der_index));
            }
            step = controller.step_alg2(y_prev, curves, p_pv_prev, rng);
        } else if (scenario.algorithm == Algorithm::Alg1) {
            step = controller.step_alg1(y_prev, rng);
        } else {
            step = controller.step_additive(y_prev, rng);
        }

        u += step.du;

        // Actuate the PV plants.
        if (voltage_mode) {
            for (std::size_t j = 0; j < pvs.size(); ++j) {
                auto& pv = pvs[j];
                const bool tracking =
                    pv.curve.has_value() &&
                    std::isfinite(step.v_star(static_cast<Eigen::Index>(j)));
                if (tracking) {
                    pv.v_applied = step.v_star(static_cast<Eigen::Index>(j));
                } else {
                    pv.v_applied =
                        probe_voltage(pv.site, pv.probe_index, scenario.pv_fit_window);
                    ++pv.probe_index;
                }
            }
        }
        avail = pv_availability(t);
        Eigen::VectorXd solver_u = u;
        if (voltage_mode)
            for (const auto& pv : pvs)
                solver_u(pv.site.der_index) = avail(pv.site.der_index);

        point = solve_steady_state(model, solver_u, loads, avail, &point);
        SystemOutput out = measure(point);
        out.k = k;

        rec.is_control = true;
        rec.k = k;
        rec.y = out.as_vector();
        rec.step = step;
        rec.dy = rec.y - y_prev;
        rec.prediction_error_pct = prediction_error(rec.dy, step.predicted_dy, thresholds);

        // The regressor must carry the input adjustment the plant actually
        // saw: GFL active power is actuated through the DC voltage (or
        // clipped at availability), so its applied adjustment is the
        // measured injection change, not the commanded one.
        Eigen::VectorXd du_applied = step.du;
        for (const auto& pv : pvs)
            du_applied(pv.site.der_index) =
                point.der_p(pv.site.der_index) - pv_p_before(pv.site.der_index);
        controller.assimilate(du_applied, rec.dy);

        // Setpoint bookkeeping for GFL units follows the measured injection,
        // so curtailment never winds up the integrator.
        for (const auto& pv : pvs)
            u(pv.site.der_index) = point.der_p(pv.site.der_index);

        // Collect PV power-voltage samples and fit traces.
        rec.pv_v_applied.resize(static_cast<Eigen::Index>(pvs.size()));
        rec.pv_p_measured.resize(static_cast<Eigen::Index>(pvs.size()));
        rec.pv_capacity.resize(static_cast<Eigen::Index>(pvs.size()));
        rec.pv_rmse.resize(static_cast<Eigen::Index>(pvs.size()));
        rec.pv_beta_flat = Eigen::VectorXd::Constant(
            static_cast<Eigen::Index>(pvs.size()) * (scenario.pv_degree + 1),
            std::numeric_limits<double>::quiet_NaN());
        for (std::size_t j = 0; j < pvs.size(); ++j) {
            auto& pv = pvs[j];
            const double p_meas = point.der_p(pv.site.der_index);
            if (voltage_mode) {
                pv.samples.emplace_back(pv.v_applied, p_meas);
                while (static_cast<int>(pv.samples.size()) > scenario.pv_fit_window + 1)
                    pv.samples.pop_front();
            }
            rec.pv_v_applied(static_cast<Eigen::Index>(j)) = pv.v_applied;
            rec.pv_p_measured(static_cast<Eigen::Index>(j)) = p_meas;
            rec.pv_capacity(static_cast<Eigen::Index>(j)) =
                pv.curve ? estimate_capacity(*pv.curve).p_max
                         : std::numeric_limits<double>::quiet_NaN();
            rec.pv_rmse(static_cast<Eigen::Index>(j)) =
                pv.curve ? pv.curve->rmse : std::numeric_limits<double>::quiet_NaN();
            if (pv.curve)
                for (Eigen::Index c = 0; c < pv.curve->beta.size(); ++c)
                    rec.pv_beta_flat(static_cast<Eigen::Index>(j) *
                                         (scenario.pv_degree + 1) +
                                     c) = pv.curve->beta(c);
        }

        const Eigen::MatrixXd& S = controller.estimate().S;
        rec.s_flat.resize(S.size());
        for (Eigen::Index r = 0; r < S.rows(); ++r)
            for (Eigen::Index c = 0; c < S.cols(); ++c)
                rec.s_flat(r * S.cols() + c) = S(r, c);
        const auto [lmin, lmax] = controller.input_monitor().gram_eigen_range();
        rec.pe_lambda_min = lmin;
        rec.pe_lambda_max = lmax;
        rec.pe_window_full = controller.input_monitor().warmed_up();

        y_prev = rec.y;
        log.events.push_back(std::move(rec));
    }
    } catch (const Error& ex) {
        char at[64];
        std::snprintf(at, sizeof(at), "%g", current_t);
        throw ScenarioAborted("run aborted at t = " + std::string(at) + " s: " + ex.what(),
                              std::move(log));
    }
    return log;
}

Summary summarize(const RunLog& log) {
    Summary s;
    const Eigen::Index ny = log.y_target.size();
    if (ny == 0 || log.channel_names.size() != static_cast<std::size_t>(ny))
        throw Error("summarize: malformed log header");

    std::vector<long> under10(static_cast<std::size_t>(ny), 0);
    Eigen::VectorXd sq_before = Eigen::VectorXd::Zero(ny);
    Eigen::VectorXd sq_after = Eigen::VectorXd::Zero(ny);
    double wsq_before = 0.0, wsq_after = 0.0;
    double pe_min_sum = 0.0, pe_max_sum = 0.0;
    double pe_floor = std::numeric_limits<double>::infinity();
    bool any_full = false;

    // Flow channel used for the end-of-cycle limit check (first one, if any).
    Eigen::Index flow_channel = -1;
    for (Eigen::Index i = 0; i < ny; ++i)
        if (log.channel_modes[static_cast<std::size_t>(i)] == "limit" && flow_channel < 0)
            flow_channel = i;
    if (flow_channel < 0)
        for (std::size_t i = 0; i < log.channel_names.size(); ++i)
            if (log.channel_names[i].rfind("p_", 0) == 0 && flow_channel < 0)
                flow_channel = static_cast<Eigen::Index>(i);

    long cycles = 0, improved_cycles = 0;
    double cycle_start_err = -1.0;
    const Eigen::VectorXd* cycle_last_y = nullptr;
    double flow_end_max = -std::numeric_limits<double>::infinity();

    auto err_norm = [&](const Eigen::VectorXd& y) {
        return effective_error(y, log.y_target, log.channel_modes).norm();
    };

    auto close_cycle = [&]() {
        if (cycle_start_err >= 0.0 && cycle_last_y != nullptr) {
            ++cycles;
            if (err_norm(*cycle_last_y) < cycle_start_err)
                ++improved_cycles;
            if (flow_channel >= 0)
                flow_end_max = std::max(flow_end_max, (*cycle_last_y)(flow_channel));
        }
        cycle_start_err = -1.0;
        cycle_last_y = nullptr;
    };

    for (const EventRecord& rec : log.events) {
        if (!rec.is_control) {
            close_cycle();
            ++s.perturb_events;
            cycle_start_err = err_norm(rec.y);
            continue;
        }
        ++s.control_steps;
        if (cycle_start_err >= 0.0)
            cycle_last_y = &rec.y;

        const Eigen::VectorXd y_before = rec.y - rec.dy;
        const Eigen::VectorXd err_b = effective_error(y_before, log.y_target, log.channel_modes);
        const Eigen::VectorXd err_a = effective_error(rec.y, log.y_target, log.channel_modes);
        sq_before += err_b.cwiseProduct(err_b);
        sq_after += err_a.cwiseProduct(err_a);
        wsq_before += err_b.squaredNorm();
        wsq_after += err_a.squaredNorm();
        for (Eigen::Index i = 0; i < ny; ++i)
            if (rec.prediction_error_pct(i) < 10.0)
                ++under10[static_cast<std::size_t>(i)];
        pe_min_sum += rec.pe_lambda_min;
        pe_max_sum += rec.pe_lambda_max;
        if (rec.pe_window_full) {
            any_full = true;
            pe_floor = std::min(pe_floor, rec.pe_lambda_min);
        }
    }
    close_cycle();

    const double steps = std::max<long>(1, s.control_steps);
    for (Eigen::Index i = 0; i < ny; ++i) {
        ChannelSummary ch;
        ch.name = log.channel_names[static_cast<std::size_t>(i)];
        ch.frac_under_10 = static_cast<double>(under10[static_cast<std::size_t>(i)]) / steps;
        ch.rms_before = std::sqrt(sq_before(i) / steps);
        ch.rms_after = std::sqrt(sq_after(i) / steps);
        s.channels.push_back(ch);
    }
    s.pe_lambda_min_avg = pe_min_sum / steps;
    s.pe_lambda_max_avg = pe_max_sum / steps;
    s.pe_lambda_min_floor = any_full ? pe_floor : 0.0;
    s.cycle_improvement_fraction =
        cycles > 0 ? static_cast<double>(improved_cycles) / static_cast<double>(cycles) : 1.0;
    s.flow_cycle_end_max = std::isfinite(flow_end_max) ? flow_end_max : 0.0;
    s.weighted_error_rms_before = std::sqrt(wsq_before / steps);
    s.weighted_error_rms_after = std::sqrt(wsq_after / steps);
    return s;
}

namespace {

json vec_to_json(const Eigen::VectorXd& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (std::isnan(v(i)))
            arr.push_back(nullptr);
        else
            arr.push_back(v(i));
    }
    return arr;
}

Eigen::VectorXd vec_from_json(const json& arr) {
    Eigen::VectorXd v(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i)
        v(static_cast<Eigen::Index>(i)) =
            arr[i].is_null() ? std::numeric_limits<double>::quiet_NaN()
                             : arr[i].get<double>();
    return v;
}

json step_to_json(const ControlStep& step) {
    json j;
    j["k"] = step.k;
    j["dy_star"] = vec_to_json(step.dy_star);
    j["w"] = vec_to_json(step.w);
    j["eta1"] = vec_to_json(step.eta1);
    j["eta2"] = vec_to_json(step.eta2);
    j["zeta_lower"] = vec_to_json(step.zeta_lower);
    j["zeta_upper"] = vec_to_json(step.zeta_upper);
    j["alpha"] = step.alpha;
    j["nu"] = vec_to_json(step.nu);
    j["phi_star"] = vec_to_json(step.phi_star);
    j["du"] = vec_to_json(step.du);
    j["predicted_dy"] = vec_to_json(step.predicted_dy);
    j["pv_track_target"] = vec_to_json(step.pv_track_target);
    j["v_star"] = vec_to_json(step.v_star);
    j["targets_pe"] = step.targets_pe;
    j["inputs_pe"] = step.inputs_pe;
    j["pv_lower_pe"] = step.pv_lower_pe;
    j["pv_upper_pe"] = step.pv_upper_pe;
    j["kkt_residual"] = step.kkt_residual;
    j["solver_iterations"] = step.solver_iterations;
    return j;
}

ControlStep step_from_json(const json& j) {
    ControlStep step;
    step.k = j.at("k").get<long>();
    step.dy_star = vec_from_json(j.at("dy_star"));
    step.w = vec_from_json(j.at("w"));
    step.eta1 = vec_from_json(j.at("eta1"));
    step.eta2 = vec_from_json(j.at("eta2"));
    step.zeta_lower = vec_from_json(j.at("zeta_lower"));
    step.zeta_upper = vec_from_json(j.at("zeta_upper"));
    step.alpha = j.at("alpha").get<double>();
    step.nu = vec_from_json(j.at("nu"));
    step.phi_star = vec_from_json(j.at("phi_star"));
    step.du = vec_from_json(j.at("du"));
    step.predicted_dy = vec_from_json(j.at("predicted_dy"));
    step.pv_track_target = vec_from_json(j.at("pv_track_target"));
    step.v_star = vec_from_json(j.at("v_star"));
    step.targets_pe = j.at("targets_pe").get<bool>();
    step.inputs_pe = j.at("inputs_pe").get<bool>();
    step.pv_lower_pe = j.at("pv_lower_pe").get<bool>();
    step.pv_upper_pe = j.at("pv_upper_pe").get<bool>();
    step.kkt_residual = j.at("kkt_residual").get<double>();
    step.solver_iterations = j.at("solver_iterations").get<int>();
    return step;
}

} // namespace

std::string run_log_to_jsonl(const RunLog& log) {
    std::ostringstream out;
    json header;
    header["type"] = "header";
    header["scenario"] = log.scenario_name;
    header["algorithm"] = log.algorithm;
    header["seed"] = log.seed;
    header["channels"] = log.channel_names;
    header["modes"] = log.channel_modes;
    header["y_target"] = vec_to_json(log.y_target);
    header["y0"] = vec_to_json(log.y0);
    out << header.dump() << "\n";

    for (const EventRecord& rec : log.events) {
        json j;
        j["type"] = rec.is_control ? "control" : "perturb";
        j["t"] = rec.t;
        j["y"] = vec_to_json(rec.y);
        if (rec.is_control) {
            j["k"] = rec.k;
            j["dy"] = vec_to_json(rec.dy);
            j["e_pct"] = vec_to_json(rec.prediction_error_pct);
            j["step"] = step_to_json(rec.step);
            j["s_flat"] = vec_to_json(rec.s_flat);
            j["pe_lambda_min"] = rec.pe_lambda_min;
            j["pe_lambda_max"] = rec.pe_lambda_max;
            j["pe_window_full"] = rec.pe_window_full;
            j["pv_v_applied"] = vec_to_json(rec.pv_v_applied);
            j["pv_p_measured"] = vec_to_json(rec.pv_p_measured);
            j["pv_capacity"] = vec_to_json(rec.pv_capacity);
            j["pv_rmse"] = vec_to_json(rec.pv_rmse);
            j["pv_beta"] = vec_to_json(rec.pv_beta_flat);
        }
        out << j.dump() << "\n";
    }
    return out.str();
}

RunLog run_log_from_jsonl(const std::string& text) {
    RunLog log;
    std::istringstream in(text);
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        const json j = json::parse(line);
        const std::string type = j.at("type").get<std::string>();
        if (type == "header") {
            log.scenario_name = j.at("scenario").get<std::string>();
            log.algorithm = j.at("algorithm").get<std::string>();
            log.seed = j.at("seed").get<std::uint64_t>();
            log.channel_names = j.at("channels").get<std::vector<std::string>>();
            log.channel_modes = j.at("modes").get<std::vector<std::string>>();
            log.y_target = vec_from_json(j.at("y_target"));
            log.y0 = vec_from_json(j.at("y0"));
            have_header = true;
            continue;
        }
        if (!have_header)
            throw ParseError("run log: events before header");
        EventRecord rec;
        rec.t = j.at("t").get<double>();
        rec.y = vec_from_json(j.at("y"));
        if (type == "control") {
            rec.is_control = true;
            rec.k = j.at("k").get<long>();
            rec.dy = vec_from_json(j.at("dy"));
            rec.prediction_error_pct = vec_from_json(j.at("e_pct"));
            rec.step = step_from_json(j.at("step"));
            rec.s_flat = vec_from_json(j.at("s_flat"));
            rec.pe_lambda_min = j.at("pe_lambda_min").get<double>();
            rec.pe_lambda_max = j.at("pe_lambda_max").get<double>();
            rec.pe_window_full = j.at("pe_window_full").get<bool>();
            rec.pv_v_applied = vec_from_json(j.at("pv_v_applied"));
            rec.pv_p_measured = vec_from_json(j.at("pv_p_measured"));
            rec.pv_capacity = vec_from_json(j.at("pv_capacity"));
            rec.pv_rmse = vec_from_json(j.at("pv_rmse"));
            rec.pv_beta_flat = vec_from_json(j.at("pv_beta"));
        } else if (type == "perturb") {
            rec.is_control = false;
            rec.k = -1;
        } else {
            throw ParseError("run log: unknown record type '" + type + "'");
        }
        log.events.push_back(std::move(rec));
    }
    if (!have_header)
        throw ParseError("run log: missing header");
    return log;
}

std::string summary_to_json(const Summary& s) {
    json j;
    j["control_steps"] = s.control_steps;
    j["perturb_events"] = s.perturb_events;
    j["pe_lambda_min_avg"] = s.pe_lambda_min_avg;
    j["pe_lambda_max_avg"] = s.pe_lambda_max_avg;
    j["pe_lambda_min_floor"] = s.pe_lambda_min_floor;
    j["cycle_improvement_fraction"] = s.cycle_improvement_fraction;
    j["flow_cycle_end_max"] = s.flow_cycle_end_max;
    j["weighted_error_rms_before"] = s.weighted_error_rms_before;
    j["weighted_error_rms_after"] = s.weighted_error_rms_after;
    j["channels"] = json::array();
    for (const ChannelSummary& ch : s.channels) {
        json c;
        c["name"] = ch.name;
        c["frac_under_10"] = ch.frac_under_10;
        c["rms_before"] = ch.rms_before;
        c["rms_after"] = ch.rms_after;
        j["channels"].push_back(c);
    }
    return j.dump(2);
}

std::string summary_table(const Summary& s) {
    char buf[256];
    std::ostringstream out;
    out << "channel        under-10%   rms-before   rms-after\n";
    for (const ChannelSummary& ch : s.channels) {
        std::snprintf(buf, sizeof(buf), "%-14s %9.1f%% %12.31e %11.31e\n", ch.name.c_str(),
                      100.0 * ch.frac_under_10, ch.rms_before, ch.rms_after);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "steps: %ld control, %ld perturbations; cycles improved: %.1f%%\n",
                  s.control_steps, s.perturb_events, 100.0 * s.cycle_improvement_fraction);
    out << buf;
    std::snprintf(buf, sizeof(buf),
                  "PE gram eigenvalues: avg [%.3e, %.3e], floor %.3e\n",
                  s.pe_lambda_min_avg, s.pe_lambda_max_avg, s.pe_lambda_min_floor);
    out << buf;
    std::snprintf(buf, sizeof(buf), "critical flow at cycle ends: max %.4f pu\n",
                  s.flow_cycle_end_max);
    out << buf;
    std::snprintf(buf, sizeof(buf), "weighted error RMS: %.4e -> %.4e\n",
                  s.weighted_error_rms_before, s.weighted_error_rms_after);
    out << buf;
    return out.str();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot write " + path.string());
    out << text;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

void write_run_log(const RunLog& log, const std::string& directory) {
    const fs::path dir(directory);
    fs::create_directories(dir);

    write_text(dir / "runlog.jsonl", run_log_to_jsonl(log));

    // Output trajectories (one row per settled event).
    {
        std::ostringstream csv;
        csv << "t,event,k";
        for (const std::string& ch : log.channel_names)
            csv << "," << ch;
        csv << "\n";
        for (const EventRecord& rec : log.events) {
            csv << fmt(rec.t) << "," << (rec.is_control ? "control" : "perturb") << ","
                << rec.k;
            for (Eigen::Index i = 0; i < rec.y.size(); ++i)
                csv << "," << fmt(rec.y(i));
            csv << "\n";
        }
        write_text(dir / "output.csv", csv.str());
    }

    // Control decisions.
    {
        std::ostringstream csv;
        csv << "k,t,alpha,nu_norm,targets_pe,inputs_pe,pv_lower_pe,pv_upper_pe,"
               "kkt_residual,solver_iterations,dy_star,w,eta1,eta2,zeta_lower,zeta_upper,"
               "du,v_star\n";
        auto join = [](const Eigen::VectorXd& v) {
            std::string s;
            for (Eigen::Index i = 0; i < v.size(); ++i) {
                if (i)
                    s += ';';
                s += fmt(v(i));
            }
            return s;
        };
        for (const EventRecord& rec : log.events) {
            if (!rec.is_control)
                continue;
            const ControlStep& st = rec.step;
            csv << rec.k << "," << fmt(rec.t) << "," << fmt(st.alpha) << ","
                << fmt(st.nu.norm()) << "," << st.targets_pe << "," << st.inputs_pe << ","
                << st.pv_lower_pe << "," << st.pv_upper_pe << "," << fmt(st.kkt_residual)
                << "," << st.solver_iterations << "," << join(st.dy_star) << ","
                << join(st.w) << "," << join(st.eta1) << "," << join(st.eta2) << ","
                << join(st.zeta_lower) << "," << join(st.zeta_upper) << "," << join(st.du)
                << "," << join(st.v_star) << "\n";
        }
        write_text(dir / "controls.csv", csv.str());
    }

    // Estimator trace: flattened sensitivity matrix plus PE window extremes.
    {
        std::ostringstream csv;
        csv << "k,pe_lambda_min,pe_lambda_max,s_row_major\n";
        for (const EventRecord& rec : log.events) {
            if (!rec.is_control)
                continue;
            csv << rec.k << "," << fmt(rec.pe_lambda_min) << "," << fmt(rec.pe_lambda_max)
                << ",";
            for (Eigen::Index i = 0; i < rec.s_flat.size(); ++i) {
                if (i)
                    csv << ";";
                csv << fmt(rec.s_flat(i));
            }
            csv << "\n";
        }
        write_text(dir / "estimator.csv", csv.str());
    }

    // PV fit trace.
    {
        std::ostringstream csv;
        csv << "k,pv,v_applied,p_measured,capacity,rmse,beta\n";
        for (const EventRecord& rec : log.events) {
            if (!rec.is_control)
                continue;
            const Eigen::Index npv = rec.pv_v_applied.size();
            const Eigen::Index nb = npv > 0 ? rec.pv_beta_flat.size() / npv : 0;
            for (Eigen::Index j = 0; j < npv; ++j) {
                csv << rec.k << "," << j << "," << fmt(rec.pv_v_applied(j)) << ","
                    << fmt(rec.pv_p_measured(j)) << "," << fmt(rec.pv_capacity(j)) << ","
                    << fmt(rec.pv_rmse(j)) << ",";
                for (Eigen::Index c = 0; c < nb; ++c) {
                    if (c)
                        csv << ";";
                    csv << fmt(rec.pv_beta_flat(j * nb + c));
                }
                csv << "\n";
            }
        }
        write_text(dir / "pvfit.csv", csv.str());
    }

    // Prediction errors.
    {
        std::ostringstream csv;
        csv << "k";
        for (const std::string& ch : log.channel_names)
            csv << ",e_" << ch;
        csv << "\n";
        for (const EventRecord& rec : log.events) {
            if (!rec.is_control)
                continue;
            csv << rec.k;
            for (Eigen::Index i = 0; i < rec.prediction_error_pct.size(); ++i)
                csv << "," << fmt(rec.prediction_error_pct(i));
            csv << "\n";
        }
        write_text(dir / "prediction_errors.csv", csv.str());
    }

    const Summary s = summarize(log);
    write_text(dir / "summary.json", summary_to_json(s));
    write_text(dir / "summary.txt", summary_table(s));
}

} // namespace dersec
