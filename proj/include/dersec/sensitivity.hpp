#pragma once

#include <Eigen/Dense>

#include <deque>
#include <utility>
#include <vector>

namespace dersec {

struct NetworkModel;

/// Exponentially weighted recursive least-squares state for the output
/// sensitivity matrix. Row blocks are ordered [frequency; voltages; flows].
struct SensitivityEstimate {
    Eigen::MatrixXd S;   // d_y x 2m
    Eigen::MatrixXd F;   // 2m x 2m, symmetric positive definite
    double lambda = 0.85;
    double rho1 = 1000.0;
    long updates = 0;

    Eigen::Index output_dim() const { return S.rows(); }
    Eigen::Index input_dim() const { return S.cols(); }
};

/// Droop-based initialization: the frequency row couples equally to all GFM
/// active setpoints through the composite frequency droop, the voltage rows
/// to all GFM reactive setpoints through the composite voltage droop, and
/// the flow rows start at zero. Non-GFM (PV) columns start at zero.
/// `freq_droops`/`volt_droops` are per-DER and ignored where is_gfm is false.
SensitivityEstimate init_sensitivity(const Eigen::VectorXd& freq_droops,
                                     const Eigen::VectorXd& volt_droops,
                                     const std::vector<bool>& is_gfm, int d_v, int d_l,
                                     double lambda, double rho1);

/// Model-based overload; the frequency row is expressed in Hz per pu to
/// match the measured output vector.
SensitivityEstimate init_sensitivity(const NetworkModel& model, double lambda,
                                     double rho1);

/// One RLS step with forgetting; F is re-symmetrized after the update.
void rls_update(SensitivityEstimate& est, const Eigen::VectorXd& du,
                const Eigen::VectorXd& dy);

Eigen::VectorXd predict(const SensitivityEstimate& est, const Eigen::VectorXd& du);

/// Closed-form minimizer of
///   sum_l lambda^(k-l) ||dy[l] - S du[l]||^2 + lambda^k rho1^-1 ||S - S1||_F^2
/// over the full history; test oracle for the recursion.
Eigen::MatrixXd batch_ls(
    const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& history,
    double lambda, double rho1, const Eigen::MatrixXd& S1);

/// Sliding-window persistent-excitation check: the Gram sum of the last
/// window+1 vectors must have all eigenvalues inside (rho_lower, rho_upper).
/// While fewer than window+1 vectors have been pushed the check is false.
class PeMonitor {
public:
    PeMonitor(Eigen::Index dim, int window, double rho_lower, double rho_upper);

    void push(const Eigen::VectorXd& v);
    bool is_pe() const;
    bool warmed_up() const { return static_cast<int>(buffer_.size()) == window_ + 1; }

    /// Extremal eigenvalues of the Gram sum over the current buffer contents
    /// (partial during warm-up). Zero matrix when empty.
    std::pair<double, double> gram_eigen_range() const;

    Eigen::Index dim() const { return dim_; }
    int window() const { return window_; }

private:
    Eigen::Index dim_;
    int window_;
    double rho_lower_;
    double rho_upper_;
    std::deque<Eigen::VectorXd> buffer_;
};

} // namespace dersec
