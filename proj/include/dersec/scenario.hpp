#pragma once

#include "dersec/common.hpp"
#include "dersec/controller.hpp"
#include "dersec/network.hpp"
#include "dersec/pv_plant.hpp"
#include "dersec/steady_state.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dersec {

enum class Algorithm { Alg1, Alg2, Additive };

std::string algorithm_name(Algorithm a);
Algorithm algorithm_from_name(const std::string& name);

/// Ground-truth description of one PV plant in the scenario (invisible to
/// the controller, which only sees voltage/power samples).
struct PvSite {
    int der_index = 0;        // position in the DER list (0-based)
    PvArrayTruth array;
    std::size_t trace_site = 0;  // column in the irradiance trace
    double fit_v_min = 0.0;      // controller-side voltage window [V]
    double fit_v_max = 0.0;
};

struct Scenario {
    std::string name;
    std::string case_path;
    std::string irradiance_path;
    double duration_s = 400.0;
    double perturb_period_s = 4.0;
    double control_period_s = 1.0;
    double perturb_magnitude = 0.2;
    Algorithm algorithm = Algorithm::Alg2;
    std::uint64_t seed = 1;

    // Controller parameters.
    double rho = 0.0;
    double a1 = 0.5;
    double a2 = 0.4;
    double a3 = 0.4;
    double alpha_max = 0.05;
    double additive_noise = 0.02;
    double du_min = -0.1;
    double du_max = 0.1;
    bool flow_two_sided = false;

    // Estimator parameters.
    double lambda = 0.85;
    double rho1 = 1000.0;
    int pe_window = 20;
    double pe_rho_lower = 1e-4;
    double pe_rho_upper = 1e4;

    // PV curve fitting.
    int pv_degree = 4;
    int pv_fit_window = 9;

    // Measurement thresholds (prediction-error denominators) and noise.
    double threshold_freq_hz = 1e-3;
    double threshold_v = 1e-4;
    double threshold_flow = 1e-4;
    double noise_freq_hz = 0.0;
    double noise_v = 0.0;
    double noise_flow = 0.0;

    std::vector<PvSite> pv_sites;

    void validate() const;
};

Scenario load_scenario(const std::string& text, const std::string& base_dir);
Scenario load_scenario_file(const std::string& path);

/// One settled event of a run: a load perturbation or a control action.
struct EventRecord {
    double t = 0.0;
    bool is_control = false;
    long k = -1;                 // control step index, -1 for perturbations
    Eigen::VectorXd y;           // measured output after settling

    // Control events only.
    ControlStep step;
    Eigen::VectorXd dy;
    Eigen::VectorXd prediction_error_pct;
    Eigen::VectorXd s_flat;      // sensitivity estimate after assimilation, row-major
    double pe_lambda_min = 0.0;  // input Gram window, partial during warm-up
    double pe_lambda_max = 0.0;
    bool pe_window_full = false;

    // PV bookkeeping (per configured PV site; empty vectors when none).
    Eigen::VectorXd pv_v_applied;
    Eigen::VectorXd pv_p_measured;
    Eigen::VectorXd pv_capacity;   // fitted capacity estimate, NaN before a fit
    Eigen::VectorXd pv_rmse;       // fit residual, NaN before a fit
    Eigen::VectorXd pv_beta_flat;  // fitted coefficients, degree+1 per site
};

struct RunLog {
    std::string scenario_name;
    std::string algorithm;
    std::uint64_t seed = 0;
    std::vector<std::string> channel_names;
    std::vector<std::string> channel_modes;  // "track" or "limit"
    Eigen::VectorXd y_target;
    Eigen::VectorXd y0;
    std::vector<EventRecord> events;
};

/// Thrown when a module error aborts a run mid-calendar; carries the events
/// settled so far so callers can flush the partial log.
class ScenarioAborted : public Error {
public:
    ScenarioAborted(const std::string& what, RunLog partial)
        : Error(what), partial_log(std::move(partial)) {}

    RunLog partial_log;
};

/// Execute the full event calendar of a scenario and return the complete
/// log. Deterministic for a fixed scenario (including its seed). Module
/// errors mid-run surface as ScenarioAborted with the partial log attached.
RunLog run_scenario(const Scenario& scenario);

/// Per-channel prediction error in percent:
///   e_i = |dy_i - dy_hat_i| / max(|dy_i|, threshold_i) * 100.
Eigen::VectorXd prediction_error(const Eigen::VectorXd& dy, const Eigen::VectorXd& dy_hat,
                                 const Eigen::VectorXd& thresholds);

struct ChannelSummary {
    std::string name;
    double frac_under_10 = 0.0;  // prediction errors below 10 %
    double rms_before = 0.0;     // RMS target error entering control actions
    double rms_after = 0.0;      // RMS target error after control actions
};

struct Summary {
    std::vector<ChannelSummary> channels;
    long control_steps = 0;
    long perturb_events = 0;
    double pe_lambda_min_avg = 0.0;
    double pe_lambda_max_avg = 0.0;
    double pe_lambda_min_floor = 0.0;       // min over steps with a full window
    double cycle_improvement_fraction = 0.0;  // cycles where the error norm fell
    double flow_cycle_end_max = 0.0;          // worst end-of-cycle critical flow
    double weighted_error_rms_before = 0.0;
    double weighted_error_rms_after = 0.0;
};

Summary summarize(const RunLog& log);

std::string summary_table(const Summary& summary);
std::string summary_to_json(const Summary& summary);

/// Lossless text serialization of a run log (JSON lines; first line is the
/// header record).
std::string run_log_to_jsonl(const RunLog& log);
RunLog run_log_from_jsonl(const std::string& text);

/// Persist a run: runlog.jsonl plus plot-ready CSVs and the summary pair.
void write_run_log(const RunLog& log, const std::string& directory);

} // namespace dersec
