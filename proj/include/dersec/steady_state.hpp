#pragma once

#include "dersec/network.hpp"

#include <Eigen/Dense>

#include <optional>

namespace dersec {

class Rng;

/// A solved quasi-static operating point of the droop-governed network.
struct OperatingPoint {
    Eigen::VectorXd v_mag;  // per bus [pu]
    Eigen::VectorXd v_ang;  // per bus [rad]
    double omega = 0.0;     // system frequency [rad/s]
    Eigen::VectorXd der_p;  // per DER active injection [pu]
    Eigen::VectorXd der_q;  // per DER reactive injection [pu]
    double max_mismatch = 0.0;
    int iterations = 0;
};

/// Measured output vector: average GFM frequency (Hz), voltage magnitudes at
/// the critical buses, active flows on the critical lines.
struct SystemOutput {
    double omega_hz = 0.0;
    Eigen::VectorXd v;  // over critical buses [pu]
    Eigen::VectorXd p;  // over critical lines [pu]
    long k = 0;

    Eigen::VectorXd as_vector() const;
};

/// Newton solve of the augmented steady state: AC power balance at every
/// non-GFM bus, the droop voltage relation for each GFM, and the droop
/// frequency relation coupling all GFMs to the single unknown frequency
/// (distributed slack). GFL units inject min(P setpoint, available) and
/// track their reactive setpoints exactly. Converged when the largest
/// residual falls below 1e-8; warm starts fall back to a flat start.
///
/// `setpoints` is the control-input vector [P; Q] over DERs;
/// `pv_available` is sized like the DER list, read only at GFL positions.
OperatingPoint solve_steady_state(const NetworkModel& model,
                                  const Eigen::VectorXd& setpoints,
                                  const LoadSet& loads,
                                  const Eigen::VectorXd& pv_available,
                                  const OperatingPoint* warm_start = nullptr);

/// Largest per-bus complex power mismatch of a point [pu].
double power_balance_residual(const NetworkModel& model, const OperatingPoint& point,
                              const Eigen::VectorXd& setpoints, const LoadSet& loads,
                              const Eigen::VectorXd& pv_available);

/// Largest residual of the GFM steady-state voltage/frequency relations.
double droop_relation_residual(const NetworkModel& model, const OperatingPoint& point,
                               const Eigen::VectorXd& setpoints);

/// Active power entering branch `branch_index` at its from end [pu].
double branch_flow_from(const NetworkModel& model, const OperatingPoint& point,
                        int branch_index);

/// Restrict a solved point to the measured channels. When `noise_std` is
/// non-null, adds independent zero-mean Gaussian noise per channel.
SystemOutput measure_output(const NetworkModel& model, const OperatingPoint& point,
                            const Eigen::VectorXd* noise_std = nullptr,
                            Rng* rng = nullptr);

} // namespace dersec
