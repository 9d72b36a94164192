#include "dersec/sensitivity.hpp"

#include "dersec/common.hpp"
#include "dersec/network.hpp"

#include <cassert>
#include <cmath>

namespace dersec {

namespace {

double parallel_combination(const Eigen::VectorXd& droops, const std::vector<bool>& mask) {
    double inv_sum = 0.0;
    for (Eigen::Index i = 0; i < droops.size(); ++i) {
        if (!mask[static_cast<std::size_t>(i)])
            continue;
        if (droops(i) <= 0.0)
            throw Error("init_sensitivity: nonpositive droop");
        inv_sum += 1.0 / droops(i);
    }
    if (inv_sum == 0.0)
        throw Error("init_sensitivity: no grid-forming inverter present");
    return 1.0 / inv_sum;
}

} // namespace

SensitivityEstimate init_sensitivity(const Eigen::VectorXd& freq_droops,
                                     const Eigen::VectorXd& volt_droops,
                                     const std::vector<bool>& is_gfm, int d_v, int d_l,
                                     double lambda, double rho1) {
    const Eigen::Index m = freq_droops.size();
    if (volt_droops.size() != m || static_cast<Eigen::Index>(is_gfm.size()) != m)
        throw Error("init_sensitivity: per-DER vectors disagree in length");
    if (!(lambda > 0.0 && lambda <= 1.0))
        throw Error("init_sensitivity: forgetting factor outside (0, 1]");
    if (rho1 <= 0.0)
        throw Error("init_sensitivity: rho1 must be positive");

    const double rf_eq = parallel_combination(freq_droops, is_gfm);
    const double rv_eq = parallel_combination(volt_droops, is_gfm);

    Eigen::VectorXd e = Eigen::VectorXd::Zero(m);
    for (Eigen::Index i = 0; i < m; ++i)
        e(i) = is_gfm[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

    SensitivityEstimate est;
    est.lambda = lambda;
    est.rho1 = rho1;
    est.S = Eigen::MatrixXd::Zero(1 + d_v + d_l, 2 * m);
    est.S.block(0, 0, 1, m) = (rf_eq * e).transpose();
    for (int r = 0; r < d_v; ++r)
        est.S.block(1 + r, m, 1, m) = (rv_eq * e).transpose();
    est.F = rho1 * Eigen::MatrixXd::Identity(2 * m, 2 * m);
    return est;
}

SensitivityEstimate init_sensitivity(const NetworkModel& model, double lambda,
                                     double rho1) {
    const Eigen::Index m = static_cast<Eigen::Index>(model.ders.size());
    Eigen::VectorXd rf(m), rv(m);
    std::vector<bool> is_gfm(model.ders.size());
    for (Eigen::Index i = 0; i < m; ++i) {
        const Der& der = model.ders[static_cast<std::size_t>(i)];
        is_gfm[static_cast<std::size_t>(i)] = der.is_gfm();
        if (der.is_gfm()) {
            const GfmParams& p = model.gfm[static_cast<std::size_t>(der.gfm_index)];
            rf(i) = rad_to_hz(p.r_f);  // output frequency channel is in Hz
            rv(i) = p.r_v;
        } else {
            rf(i) = 1.0;  // unused; masked out
            rv(i) = 1.0;
        }
    }
    return init_sensitivity(rf, rv, is_gfm,
                            static_cast<int>(model.critical_buses.size()),
                            static_cast<int>(model.critical_lines.size()), lambda, rho1);
}

void rls_update(SensitivityEstimate& est, const Eigen::VectorXd& du,
                const Eigen::VectorXd& dy) {
    if (du.size() != est.input_dim() || dy.size() != est.output_dim())
        throw Error("rls_update: dimension mismatch");
    if (!du.allFinite() || !dy.allFinite())
        throw Error("rls_update: non-finite input");

    const double inv_lambda = 1.0 / est.lambda;
    const Eigen::VectorXd Fdu = est.F * du;
    const double denom = 1.0 + inv_lambda * du.dot(Fdu);
    const Eigen::VectorXd gain = (inv_lambda / denom) * Fdu;

    est.S += (dy - est.S * du) * gain.transpose();
    est.F = inv_lambda * est.F - inv_lambda * gain * (du.transpose() * est.F);
    est.F = (0.5 * (est.F + est.F.transpose())).eval();
    ++est.updates;

#ifndef NDEBUG
    {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(est.F);
        assert(eig.eigenvalues().minCoeff() > 0.0 && "RLS covariance lost definiteness");
    }
#endif
}

Eigen::VectorXd predict(const SensitivityEstimate& est, const Eigen::VectorXd& du) {
    if (du.size() != est.input_dim())
        throw Error("predict: dimension mismatch");
    return est.S * du;
}

Eigen::MatrixXd batch_ls(
    const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& history,
    double lambda, double rho1, const Eigen::MatrixXd& S1) {
    if (history.empty())
        throw Error("batch_ls: empty history");
    const Eigen::Index nu = history.front().first.size();
    const Eigen::Index ny = history.front().second.size();
    if (S1.rows() != ny || S1.cols() != nu)
        throw Error("batch_ls: prior shape mismatch");

    const std::size_t k = history.size();
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(nu, nu);
    Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(ny, nu);
    for (std::size_t l = 0; l < k; ++l) {
        const double w = std::pow(lambda, static_cast<double>(k - 1 - l));
        gram += w * history[l].first * history[l].first.transpose();
        cross += w * history[l].second * history[l].first.transpose();
    }
    const double prior_w = std::pow(lambda, static_cast<double>(k)) / rho1;
    gram += prior_w * Eigen::MatrixXd::Identity(nu, nu);
    cross += prior_w * S1;

    // S gram = cross  =>  gram' S' = cross'  (gram symmetric PD).
    return gram.ldlt().solve(cross.transpose()).transpose();
}

PeMonitor::PeMonitor(Eigen::Index dim, int window, double rho_lower, double rho_upper)
    : dim_(dim), window_(window), rho_lower_(rho_lower), rho_upper_(rho_upper) {
    if (dim <= 0 || window < 1)
        throw Error("PeMonitor: bad dimension or window");
    if (!(rho_upper > rho_lower && rho_lower > 0.0))
        throw Error("PeMonitor: thresholds must satisfy rho_upper > rho_lower > 0");
}

void PeMonitor::push(const Eigen::VectorXd& v) {
    if (v.size() != dim_)
        throw Error("PeMonitor: vector dimension mismatch");
    buffer_.push_back(v);
    while (static_cast<int>(buffer_.size()) > window_ + 1)
        buffer_.pop_front();
}

std::pair<double, double> PeMonitor::gram_eigen_range() const {
    if (buffer_.empty())
        return {0.0, 0.0};
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(dim_, dim_);
    for (const auto& v : buffer_)
        gram += v * v.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    return {eig.eigenvalues().minCoeff(), eig.eigenvalues().maxCoeff()};
}

bool PeMonitor::is_pe() const {
    if (!warmed_up())
        return false;
    const auto [lo, hi] = gram_eigen_range();
    return lo > rho_lower_ && hi < rho_upper_;
}

} // namespace dersec
