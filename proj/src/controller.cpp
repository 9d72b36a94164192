#include "dersec/controller.hpp"

#include "dersec/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dersec {

void ControllerConfig::validate() const {
    if (!(a1 > 0.0 && a1 < 1.0) || !(a2 > 0.0 && a2 < 1.0) || !(a3 > 0.0 && a3 < 1.0))
        throw Error("ControllerConfig: a-parameters must lie in (0, 1)");
    if (rho < 0.0)
        throw Error("ControllerConfig: negative rho");
    if (du_lower.size() != du_upper.size() || du_lower.size() == 0)
        throw Error("ControllerConfig: bound vectors missing or mismatched");
    if (!du_lower.allFinite() || !du_upper.allFinite())
        throw Error("ControllerConfig: bounds must be finite");
    if ((du_lower.array() > 0.0).any() || (du_upper.array() < 0.0).any())
        throw Error("ControllerConfig: bounds must straddle zero");
    if (y_target.size() != static_cast<Eigen::Index>(channel_modes.size()))
        throw Error("ControllerConfig: channel mode count must match target length");
    for (int i : pv_inputs)
        if (i < 0 || i >= du_lower.size())
            throw Error("ControllerConfig: PV input index out of range");
}

Eigen::VectorXd jitter_target(const Eigen::VectorXd& dy_star, bool targets_pe,
                              double a1, Rng& rng) {
    if (!(a1 > 0.0 && a1 < 1.0))
        throw Error("jitter_target: a1 outside (0, 1)");
    Eigen::VectorXd w = Eigen::VectorXd::Zero(dy_star.size());
    if (targets_pe)
        return w;
    for (Eigen::Index i = 0; i < dy_star.size(); ++i)
        w(i) = -dy_star(i) * rng.uniform(0.0, a1);
    return w;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> jitter_bounds(const Eigen::VectorXd& lower,
                                                          const Eigen::VectorXd& upper,
                                                          double a2, Rng& rng) {
    if (!(a2 > 0.0 && a2 < 1.0))
        throw Error("jitter_bounds: a2 outside (0, 1)");
    Eigen::VectorXd eta1(lower.size()), eta2(upper.size());
    for (Eigen::Index i = 0; i < lower.size(); ++i)
        eta1(i) = rng.uniform(0.0, a2 * std::abs(lower(i)));
    for (Eigen::Index i = 0; i < upper.size(); ++i)
        eta2(i) = rng.uniform(0.0, a2 * std::abs(upper(i)));
    return {eta1, eta2};
}

std::pair<double, Eigen::VectorXd> null_perturbation(const Eigen::MatrixXd& S,
                                                     const Eigen::VectorXd& phi,
                                                     const Eigen::VectorXd& lower,
                                                     const Eigen::VectorXd& upper,
                                                     bool inputs_pe, double alpha_max,
                                                     Rng& rng) {
    const Eigen::Index n = S.cols();
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(n);
    if (inputs_pe)
        return {0.0, zero};
    const Eigen::MatrixXd basis = null_space_basis(S);
    if (basis.cols() == 0)
        return {0.0, zero};

    for (int attempt = 0; attempt < 8; ++attempt) {
        Eigen::VectorXd coef(basis.cols());
        for (Eigen::Index i = 0; i < coef.size(); ++i)
            coef(i) = rng.uniform(-1.0, 1.0);
        Eigen::VectorXd dir = basis * coef;
        const double norm = dir.norm();
        if (norm < 1e-12)
            continue;
        dir /= norm;

        // Largest feasible magnitude along dir from phi.
        double amax = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < n; ++i) {
            if (dir(i) > 1e-15)
                amax = std::min(amax, (upper(i) - phi(i)) / dir(i));
            else if (dir(i) < -1e-15)
                amax = std::min(amax, (lower(i) - phi(i)) / dir(i));
        }
        if (!(amax > 0.0))
            continue;

        double alpha = std::min(rng.uniform(0.0, alpha_max), amax);
        // Containment must hold exactly in double arithmetic.
        for (int shrink = 0; shrink < 64 && alpha > 0.0; ++shrink) {
            const Eigen::VectorXd trial = phi + alpha * dir;
            if ((trial.array() >= lower.array()).all() &&
                (trial.array() <= upper.array()).all())
                return {alpha, dir};
            alpha *= 1.0 - 1e-12;
        }
    }
    return {0.0, zero};
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> pv_incremental_bounds(
    const std::vector<std::optional<PvCurve>>& curves,
    const Eigen::VectorXd& p_pv_prev) {
    const Eigen::Index npv = static_cast<Eigen::Index>(curves.size());
    if (p_pv_prev.size() != npv)
        throw Error("pv_incremental_bounds: output vector length mismatch");
    Eigen::VectorXd lower = Eigen::VectorXd::Zero(npv);
    Eigen::VectorXd upper = Eigen::VectorXd::Zero(npv);
    for (Eigen::Index j = 0; j < npv; ++j) {
        if (p_pv_prev(j) < -1e-9)
            throw Error("pv_incremental_bounds: negative PV output");
        if (!curves[static_cast<std::size_t>(j)].has_value())
            continue;  // no curve yet: treated as uncontrollable
        const PvCurve& curve = *curves[static_cast<std::size_t>(j)];
        const double p_bar = estimate_capacity(curve).p_max;
        if (p_bar < 1e-4)
            continue;  // dark array: zero incremental capacity
        // Increments are restricted to the power band the curve can realize
        // on the high-voltage side of its domain; the measured output floors
        // the capacity whenever the fit lags a rising irradiance.
        const double reach_floor = std::max(0.0, curve.value(curve.v_max));
        upper(j) = std::max(0.0, p_bar - p_pv_prev(j));
        lower(j) = std::max(-p_pv_prev(j), std::min(0.0, reach_floor - p_pv_prev(j)));
    }
    return {lower, upper};
}

SecondaryController::SecondaryController(SensitivityEstimate estimate,
                                         ControllerConfig config, PeConfig pe)
    : estimate_(std::move(estimate)), config_(std::move(config)),
      input_monitor_(estimate_.input_dim(), pe.window, pe.rho_lower, pe.rho_upper),
      target_monitor_(estimate_.output_dim(), pe.window, pe.rho_lower, pe.rho_upper),
      pv_lower_monitor_(std::max<Eigen::Index>(1, static_cast<Eigen::Index>(
                                                      config_.pv_inputs.size())),
                        pe.window, pe.rho_lower, pe.rho_upper),
      pv_upper_monitor_(std::max<Eigen::Index>(1, static_cast<Eigen::Index>(
                                                      config_.pv_inputs.size())),
                        pe.window, pe.rho_lower, pe.rho_upper) {
    config_.validate();
    if (config_.du_lower.size() != estimate_.input_dim())
        throw Error("SecondaryController: bound length must equal input dimension");
    if (config_.y_target.size() != estimate_.output_dim())
        throw Error("SecondaryController: target length must equal output dimension");
}

Eigen::VectorXd SecondaryController::target_error(const Eigen::VectorXd& y_prev) const {
    if (y_prev.size() != config_.y_target.size())
        throw Error("target_error: measurement length mismatch");
    Eigen::VectorXd err = config_.y_target - y_prev;
    for (Eigen::Index i = 0; i < err.size(); ++i)
        if (config_.channel_modes[static_cast<std::size_t>(i)] == ChannelMode::UpperLimit)
            err(i) = std::min(0.0, err(i));
    return err;
}

ControlStep SecondaryController::begin_step(const Eigen::VectorXd& y_prev) {
    ControlStep step;
    step.k = k_ + 1;
    step.dy_star = target_error(y_prev);
    return step;
}

BoxLsResult SecondaryController::solve(const Eigen::VectorXd& rhs,
                                       const Eigen::VectorXd& lower,
                                       const Eigen::VectorXd& upper) const {
    BoxLsProblem problem;
    problem.A = estimate_.S;
    problem.b = rhs;
    problem.rho = config_.rho;
    problem.lower = lower;
    problem.upper = upper;
    BoxLsResult result = solve_box_ls(problem);
    if (!result.converged)
        throw SolveError("secondary controller: setpoint optimization did not converge");
    return result;
}

ControlStep SecondaryController::step_alg1(const Eigen::VectorXd& y_prev, Rng& rng) {
    ControlStep step = begin_step(y_prev);

    target_monitor_.push(step.dy_star);
    step.targets_pe = target_monitor_.is_pe();
    step.w = jitter_target(step.dy_star, step.targets_pe, config_.a1, rng);
    std::tie(step.eta1, step.eta2) =
        jitter_bounds(config_.du_lower, config_.du_upper, config_.a2, rng);

    const BoxLsResult res = solve(step.dy_star + step.w, config_.du_lower + step.eta1,
                                  config_.du_upper - step.eta2);
    step.phi_star = res.x;
    step.kkt_residual = res.kkt_residual;
    step.solver_iterations = res.iterations;

    step.inputs_pe = input_monitor_.is_pe();
    std::tie(step.alpha, step.nu) =
        null_perturbation(estimate_.S, step.phi_star, config_.du_lower,
                          config_.du_upper, step.inputs_pe, config_.alpha_max, rng);

    step.du = step.phi_star + step.alpha * step.nu;
    step.predicted_dy = estimate_.S * step.du;
    input_monitor_.push(step.du);
    k_ = step.k;
    return step;
}

ControlStep SecondaryController::step_alg2(const Eigen::VectorXd& y_prev,
                                           const std::vector<std::optional<PvCurve>>& curves,
                                           const Eigen::VectorXd& p_pv_prev, Rng& rng) {
    const auto npv = static_cast<Eigen::Index>(config_.pv_inputs.size());
    if (static_cast<Eigen::Index>(curves.size()) != npv || p_pv_prev.size() != npv)
        throw Error("step_alg2: PV argument lengths must match configured PV inputs");

    ControlStep step = begin_step(y_prev);

    target_monitor_.push(step.dy_star);
    step.targets_pe = target_monitor_.is_pe();
    step.w = jitter_target(step.dy_star, step.targets_pe, config_.a1, rng);
    std::tie(step.eta1, step.eta2) =
        jitter_bounds(config_.du_lower, config_.du_upper, config_.a2, rng);

    auto [pv_lower, pv_upper] = pv_incremental_bounds(curves, p_pv_prev);
    if (npv > 0) {
        pv_lower_monitor_.push(pv_lower);
        pv_upper_monitor_.push(pv_upper);
        step.pv_lower_pe = pv_lower_monitor_.is_pe();
        step.pv_upper_pe = pv_upper_monitor_.is_pe();
    }
    step.zeta_lower = Eigen::VectorXd::Zero(npv);
    step.zeta_upper = Eigen::VectorXd::Zero(npv);
    for (Eigen::Index j = 0; j < npv; ++j) {
        if (!step.pv_lower_pe)
            step.zeta_lower(j) = rng.uniform(0.0, config_.a3 * std::abs(pv_lower(j)));
        if (!step.pv_upper_pe)
            step.zeta_upper(j) = rng.uniform(0.0, config_.a3 * std::abs(pv_upper(j)));
    }

    // The null-space perturbation is fixed before the solve and enters the
    // constraints as offsets; PV active-power coordinates realize their
    // share through the voltage commands, every other coordinate carries it
    // directly. The shifted box rows keep phi + alpha nu inside the
    // original bounds.
    step.inputs_pe = input_monitor_.is_pe();
    step.alpha = 0.0;
    step.nu = Eigen::VectorXd::Zero(estimate_.input_dim());
    if (!step.inputs_pe) {
        const Eigen::MatrixXd basis = null_space_basis(estimate_.S);
        if (basis.cols() > 0) {
            Eigen::VectorXd coef(basis.cols());
            for (Eigen::Index i = 0; i < coef.size(); ++i)
                coef(i) = rng.uniform(-1.0, 1.0);
            const double norm = (basis * coef).norm();
            if (norm >= 1e-12) {
                step.nu = basis * coef / norm;
                step.alpha = rng.uniform(0.0, config_.alpha_max);
            }
        }
    }
    const Eigen::VectorXd shift = step.alpha * step.nu;

    Eigen::VectorXd lower =
        (config_.du_lower + step.eta1).cwiseMax(config_.du_lower - shift);
    Eigen::VectorXd upper =
        (config_.du_upper - step.eta2).cwiseMin(config_.du_upper - shift);
    for (Eigen::Index j = 0; j < npv; ++j) {
        const Eigen::Index idx = config_.pv_inputs[static_cast<std::size_t>(j)];
        lower(idx) = std::max(lower(idx), pv_lower(j) + step.zeta_lower(j) - shift(idx));
        upper(idx) = std::min(upper(idx), pv_upper(j) - step.zeta_upper(j) - shift(idx));
    }
    if ((lower.array() > upper.array()).any())
        throw InfeasibleError("step_alg2: jittered constraint box is empty");

    const BoxLsResult res = solve(step.dy_star + step.w, lower, upper);
    step.phi_star = res.x;
    step.kkt_residual = res.kkt_residual;
    step.solver_iterations = res.iterations;

    step.du = step.phi_star + shift;
    step.predicted_dy = estimate_.S * step.du;

    step.pv_track_target.resize(npv);
    step.v_star = Eigen::VectorXd::Constant(npv, std::numeric_limits<double>::quiet_NaN());
    for (Eigen::Index j = 0; j < npv; ++j) {
        const Eigen::Index idx = config_.pv_inputs[static_cast<std::size_t>(j)];
        step.pv_track_target(j) = p_pv_prev(j) + step.phi_star(idx) + shift(idx);
        const auto& curve = curves[static_cast<std::size_t>(j)];
        if (!curve.has_value())
            continue;
        const CurveCapacity cap = estimate_capacity(*curve);
        if (cap.p_max < 1e-4)
            continue;
        // Clamp to the band reachable on the high-voltage side of the
        // maximizer; commands below the curve value at the window edge pin
        // the voltage there instead of crossing to the low side.
        const double floor = curve->value(curve->v_max);
        const double target =
            std::clamp(step.pv_track_target(j), std::min(floor, cap.p_max), cap.p_max);
        step.v_star(j) = track_voltage(*curve, target);
    }

    input_monitor_.push(step.du);
    k_ = step.k;
    return step;
}

ControlStep SecondaryController::step_additive(const Eigen::VectorXd& y_prev, Rng& rng) {
    ControlStep step = begin_step(y_prev);

    target_monitor_.push(step.dy_star);
    step.targets_pe = target_monitor_.is_pe();
    step.w = Eigen::VectorXd::Zero(step.dy_star.size());
    step.eta1 = Eigen::VectorXd::Zero(config_.du_lower.size());
    step.eta2 = Eigen::VectorXd::Zero(config_.du_upper.size());

    const BoxLsResult res = solve(step.dy_star, config_.du_lower, config_.du_upper);
    step.phi_star = res.x;
    step.kkt_residual = res.kkt_residual;
    step.solver_iterations = res.iterations;

    step.inputs_pe = input_monitor_.is_pe();
    Eigen::VectorXd noise(step.phi_star.size());
    for (Eigen::Index i = 0; i < noise.size(); ++i)
        noise(i) = rng.uniform(-config_.additive_noise, config_.additive_noise);
    step.nu = Eigen::VectorXd::Zero(step.phi_star.size());
    step.du = (step.phi_star + noise)
                  .cwiseMax(config_.du_lower)
                  .cwiseMin(config_.du_upper);
    step.predicted_dy = estimate_.S * step.du;
    input_monitor_.push(step.du);
    k_ = step.k;
    return step;
}

void SecondaryController::assimilate(const Eigen::VectorXd& du, const Eigen::VectorXd& dy) {
    rls_update(estimate_, du, dy);
}

} // namespace dersec
