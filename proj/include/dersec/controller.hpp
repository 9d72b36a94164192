#pragma once

#include "dersec/box_ls.hpp"
#include "dersec/pv_curve.hpp"
#include "dersec/sensitivity.hpp"

#include <Eigen/Dense>

#include <optional>
#include <vector>

namespace dersec {

class Rng;

/// How a measured channel enters the target error: regulate to the nominal
/// value, or act only when the measurement exceeds it (thermal limits).
enum class ChannelMode { Track, UpperLimit };

struct ControllerConfig {
    double rho = 0.0;                  // control-effort weight
    double a1 = 0.5;                   // target jitter scale, in (0,1)
    double a2 = 0.4;                   // bound jitter scale, in (0,1)
    double a3 = 0.4;                   // PV-bound jitter scale, in (0,1)
    double alpha_max = 0.05;           // null-space perturbation magnitude
    double additive_noise = 0.02;      // baseline-mode noise half-width [pu]
    Eigen::VectorXd du_lower;          // 2m, <= 0
    Eigen::VectorXd du_upper;          // 2m, >= 0
    Eigen::VectorXd y_target;          // [freq Hz, V pu, flow pu]
    std::vector<ChannelMode> channel_modes;  // per output channel
    std::vector<int> pv_inputs;        // DER positions of the PV units

    void validate() const;
};

/// Everything the controller decided and observed at one control instant.
struct ControlStep {
    long k = 0;
    Eigen::VectorXd dy_star;      // target error used by the solve
    Eigen::VectorXd w;            // target jitter
    Eigen::VectorXd eta1, eta2;   // bound jitters
    Eigen::VectorXd zeta_lower, zeta_upper;  // PV bound jitters (alg2)
    double alpha = 0.0;
    Eigen::VectorXd nu;           // null-space direction (unit or zero)
    Eigen::VectorXd phi_star;     // solver minimizer
    Eigen::VectorXd du;           // applied input adjustment
    Eigen::VectorXd predicted_dy; // S du at decision time
    Eigen::VectorXd pv_track_target;  // requested PV powers after the step (alg2)
    Eigen::VectorXd v_star;       // DC voltage commands, NaN where none (alg2)
    bool targets_pe = false;
    bool inputs_pe = false;
    bool pv_lower_pe = false;
    bool pv_upper_pe = false;
    double kkt_residual = 0.0;
    int solver_iterations = 0;
};

/// Target jitter w: zero when the target-error sequence is persistently
/// exciting, otherwise each component shrunk toward zero by -dy* U(0, a1).
Eigen::VectorXd jitter_target(const Eigen::VectorXd& dy_star, bool targets_pe,
                              double a1, Rng& rng);

/// Bound jitters eta1 ~ U(0, a2 |lower|), eta2 ~ U(0, a2 |upper|) per
/// coordinate; the tightened box stays nonempty because a2 < 1 and the
/// bounds straddle zero.
std::pair<Eigen::VectorXd, Eigen::VectorXd> jitter_bounds(const Eigen::VectorXd& lower,
                                                          const Eigen::VectorXd& upper,
                                                          double a2, Rng& rng);

/// Random null-space perturbation (alpha, nu) with exact box containment of
/// phi + alpha nu; zero when inputs are already exciting or Null(S) is
/// trivial. Resamples the direction up to 8 times when no feasible
/// magnitude exists.
std::pair<double, Eigen::VectorXd> null_perturbation(const Eigen::MatrixXd& S,
                                                     const Eigen::VectorXd& phi,
                                                     const Eigen::VectorXd& lower,
                                                     const Eigen::VectorXd& upper,
                                                     bool inputs_pe, double alpha_max,
                                                     Rng& rng);

/// Incremental capacity box of each PV unit: upper = capacity - current
/// output, lower = -current output. Units without a fitted curve get [0, 0].
std::pair<Eigen::VectorXd, Eigen::VectorXd> pv_incremental_bounds(
    const std::vector<std::optional<PvCurve>>& curves, const Eigen::VectorXd& p_pv_prev);

struct PeConfig {
    int window = 20;
    double rho_lower = 1e-4;
    double rho_upper = 1e4;
};

/// The secondary controller: owns the sensitivity estimate and the
/// persistent-excitation monitors, and produces one ControlStep per call.
class SecondaryController {
public:
    SecondaryController(SensitivityEstimate estimate, ControllerConfig config,
                        PeConfig pe);

    /// Frequency/voltage/flow regulation with persistent excitation.
    ControlStep step_alg1(const Eigen::VectorXd& y_prev, Rng& rng);

    /// Adds PV power tracking: jittered PV capacity boxes in the solve and a
    /// DC voltage command per fitted PV curve.
    ControlStep step_alg2(const Eigen::VectorXd& y_prev,
                          const std::vector<std::optional<PvCurve>>& curves,
                          const Eigen::VectorXd& p_pv_prev, Rng& rng);

    /// Additive-noise baseline: plain solve plus uniform noise, clipped.
    ControlStep step_additive(const Eigen::VectorXd& y_prev, Rng& rng);

    /// Feed the measured response of the last applied step to the estimator.
    void assimilate(const Eigen::VectorXd& du, const Eigen::VectorXd& dy);

    /// Target error with per-channel semantics applied.
    Eigen::VectorXd target_error(const Eigen::VectorXd& y_prev) const;

    const SensitivityEstimate& estimate() const { return estimate_; }
    const ControllerConfig& config() const { return config_; }
    const PeMonitor& input_monitor() const { return input_monitor_; }
    long step_count() const { return k_; }

private:
    ControlStep begin_step(const Eigen::VectorXd& y_prev);
    BoxLsResult solve(const Eigen::VectorXd& rhs, const Eigen::VectorXd& lower,
                      const Eigen::VectorXd& upper) const;

    SensitivityEstimate estimate_;
    ControllerConfig config_;
    PeMonitor input_monitor_;
    PeMonitor target_monitor_;
    PeMonitor pv_lower_monitor_;
    PeMonitor pv_upper_monitor_;
    long k_ = 0;
};

} // namespace dersec
