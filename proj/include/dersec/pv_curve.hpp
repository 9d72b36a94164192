#pragma once

#include <Eigen/Dense>

#include <utility>
#include <vector>

namespace dersec {

/// Learned power-voltage characteristic of one PV array: a concave
/// polynomial c(v) = sum_l beta_l v^l with power in pu and voltage in volts.
struct PvCurve {
    Eigen::VectorXd beta;   // length degree+1, monomial basis in volts
    int degree = 0;
    int fit_window = 0;     // number of samples the fit used
    double v_min = 0.0;     // validity domain [V]
    double v_max = 0.0;
    double rmse = 0.0;      // fit residual RMSE [pu]

    double value(double v) const;
    double derivative(double v) const;
    double second_derivative(double v) const;

    /// Concavity certificate: c''(v) <= tol on a uniform grid over the domain.
    bool concavity_certificate(int grid_points = 512, double tol = 1e-9) const;
};

/// Least-squares polynomial fit with concavity enforced as second-derivative
/// inequalities on a 64-point grid over the domain; violated certificate
/// points are appended and the fit re-solved until the 512-point certificate
/// passes. Throws on fewer than degree+1 samples or a rank-deficient design.
PvCurve fit_concave_poly(const std::vector<std::pair<double, double>>& samples,
                         int degree, double v_min, double v_max);

struct CurveCapacity {
    double v_mpp = 0.0;  // argmax over the domain [V]
    double p_max = 0.0;  // curve maximum [pu]
};

/// Maximum of the polynomial over the closed domain: stationary points of c'
/// (companion-matrix roots) plus endpoint comparison.
CurveCapacity estimate_capacity(const PvCurve& curve);

/// Voltage realizing the requested power on the high-voltage side of the
/// maximizer: safeguarded Newton started at v_max with bisection fallback.
/// Targets above the curve capacity are rejected (InfeasibleError); targets
/// below the curve value at both domain ends are unreachable and rejected.
double track_voltage(const PvCurve& curve, double target_pu);

} // namespace dersec
