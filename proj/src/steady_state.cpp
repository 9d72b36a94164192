#include "dersec/steady_state.hpp"

#include "dersec/common.hpp"

#include <cmath>
#include <vector>

namespace dersec {

namespace {

constexpr double kTolerance = 1e-8;
constexpr int kMaxIterations = 50;

struct Injections {
    Eigen::VectorXd p;  // network injection per bus [pu]
    Eigen::VectorXd q;
};

Injections bus_injections(const Eigen::MatrixXcd& ybus, const Eigen::VectorXd& v,
                          const Eigen::VectorXd& theta) {
    const int n = static_cast<int>(v.size());
    Injections inj;
    inj.p = Eigen::VectorXd::Zero(n);
    inj.q = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) {
        double pi = 0.0, qi = 0.0;
        for (int k = 0; k < n; ++k) {
            const double gik = ybus(i, k).real();
            const double bik = ybus(i, k).imag();
            if (gik == 0.0 && bik == 0.0)
                continue;
            const double dth = theta(i) - theta(k);
            const double c = std::cos(dth);
            const double s = std::sin(dth);
            pi += v(k) * (gik * c + bik * s);
            qi += v(k) * (gik * s - bik * c);
        }
        inj.p(i) = v(i) * pi;
        inj.q(i) = v(i) * qi;
    }
    return inj;
}

/// Fixed generation at each bus from GFL units: P = min(setpoint, available),
/// Q = setpoint.
struct GflGeneration {
    Eigen::VectorXd p;  // per bus
    Eigen::VectorXd q;
};

GflGeneration gfl_generation(const NetworkModel& model, const Eigen::VectorXd& setpoints,
                             const Eigen::VectorXd& pv_available) {
    const int n = model.bus_count();
    const int m = model.der_count();
    GflGeneration gen;
    gen.p = Eigen::VectorXd::Zero(n);
    gen.q = Eigen::VectorXd::Zero(n);
    for (int d = 0; d < m; ++d) {
        const Der& der = model.ders[static_cast<std::size_t>(d)];
        if (der.is_gfm())
            continue;
        gen.p(der.bus) += std::min(setpoints(d), pv_available(d));
        gen.q(der.bus) += setpoints(m + d);
    }
    return gen;
}

struct NewtonProblem {
    const NetworkModel& model;
    const Eigen::VectorXd& setpoints;
    const LoadSet& loads;
    GflGeneration gfl;
    int ref_bus;                  // angle reference (first GFM bus)
    std::vector<int> theta_slot;  // per bus, column in x or -1 for reference
    std::vector<bool> has_gfm;    // per bus
    int n;

    explicit NewtonProblem(const NetworkModel& model_, const Eigen::VectorXd& sp,
                           const LoadSet& loads_, const Eigen::VectorXd& avail)
        : model(model_), setpoints(sp), loads(loads_),
          gfl(gfl_generation(model_, sp, avail)), n(model_.bus_count()) {
        ref_bus = model.gfm.front().bus;
        theta_slot.assign(static_cast<std::size_t>(n), -1);
        int slot = 0;
        for (int i = 0; i < n; ++i)
            if (i != ref_bus)
                theta_slot[static_cast<std::size_t>(i)] = slot++;
        has_gfm.assign(static_cast<std::size_t>(n), false);
        for (const GfmParams& g : model.gfm)
            has_gfm[static_cast<std::size_t>(g.bus)] = true;
    }

    int dim() const { return 2 * n; }
    int v_slot(int bus) const { return (n - 1) + bus; }
    int omega_slot() const { return 2 * n - 1; }

    Eigen::VectorXd unpack_theta(const Eigen::VectorXd& x) const {
        Eigen::VectorXd theta = Eigen::VectorXd::Zero(n);
        for (int i = 0; i < n; ++i)
            if (i != ref_bus)
                theta(i) = x(theta_slot[static_cast<std::size_t>(i)]);
        return theta;
    }

    Eigen::VectorXd unpack_v(const Eigen::VectorXd& x) const {
        return x.segment(n - 1, n);
    }

    /// Residual vector and (optionally) its Jacobian.
    Eigen::VectorXd residual(const Eigen::VectorXd& x, Eigen::MatrixXd* jac) const {
        const Eigen::VectorXd theta = unpack_theta(x);
        const Eigen::VectorXd v = unpack_v(x);
        const double omega = x(omega_slot());
        const Injections inj = bus_injections(model.ybus, v, theta);

        Eigen::VectorXd res(dim());
        if (jac)
            jac->setZero(dim(), dim());

        const auto& Y = model.ybus;

        // d(P_i)/dx and d(Q_i)/dx rows, written into the Jacobian scaled by
        // `wp`/`wq` at residual row `row`.
        auto add_power_derivatives = [&](int row, int i, double wp, double wq) {
            if (!jac)
                return;
            for (int k = 0; k < n; ++k) {
                const double gik = Y(i, k).real();
                const double bik = Y(i, k).imag();
                if (i != k && gik == 0.0 && bik == 0.0)
                    continue;
                double dp_dth, dq_dth, dp_dv, dq_dv;
                if (k == i) {
                    dp_dth = -inj.q(i) - bik * v(i) * v(i);
                    dq_dth = inj.p(i) - gik * v(i) * v(i);
                    dp_dv = inj.p(i) / v(i) + gik * v(i);
                    dq_dv = inj.q(i) / v(i) - bik * v(i);
                } else {
                    const double dth = theta(i) - theta(k);
                    const double c = std::cos(dth);
                    const double s = std::sin(dth);
                    dp_dth = v(i) * v(k) * (gik * s - bik * c);
                    dq_dth = -v(i) * v(k) * (gik * c + bik * s);
                    dp_dv = v(i) * (gik * c + bik * s);
                    dq_dv = v(i) * (gik * s - bik * c);
                }
                const int ts = theta_slot[static_cast<std::size_t>(k)];
                if (ts >= 0) {
                    (*jac)(row, ts) += wp * dp_dth + wq * dq_dth;
                }
                (*jac)(row, v_slot(k)) += wp * dp_dv + wq * dq_dv;
            }
        };

        int row = 0;
        // Power balance at non-GFM buses.
        for (int i = 0; i < n; ++i) {
            if (has_gfm[static_cast<std::size_t>(i)])
                continue;
            res(row) = inj.p(i) - gfl.p(i) + loads.p(i);
            add_power_derivatives(row, i, 1.0, 0.0);
            ++row;
            res(row) = inj.q(i) - gfl.q(i) + loads.q(i);
            add_power_derivatives(row, i, 0.0, 1.0);
            ++row;
        }

        // GFM droop relations. The voltage relation is written in its
        // inverted polynomial form,
        //   cap (Q_inv - Q_ref) - 1 + (2 V^2 / e*^2 - 1)^2 = 0,
        // which is smooth for all V and equivalent to the square-root form
        // on the physical branch V >= e*/sqrt(2).
        const int m = model.der_count();
        for (std::size_t gi = 0; gi < model.gfm.size(); ++gi) {
            const GfmParams& g = model.gfm[gi];
            const int b = g.bus;
            int der_index = -1;
            for (int d = 0; d < m; ++d)
                if (model.ders[static_cast<std::size_t>(d)].gfm_index == static_cast<int>(gi))
                    der_index = d;
            const double p_ref = setpoints(der_index);
            const double q_ref = setpoints(m + der_index);

            const double p_inv = inj.p(b) + loads.p(b) - gfl.p(b);
            const double q_inv = inj.q(b) + loads.q(b) - gfl.q(b);

            const double r_eff = g.r_f * g.e_star * g.e_star / (v(b) * v(b));
            res(row) = omega - model.omega_star + r_eff * (p_inv - p_ref);
            if (jac) {
                (*jac)(row, omega_slot()) = 1.0;
                add_power_derivatives(row, b, r_eff, 0.0);
                (*jac)(row, v_slot(b)) +=
                    -2.0 * g.r_f * g.e_star * g.e_star / (v(b) * v(b) * v(b)) *
                    (p_inv - p_ref);
            }
            ++row;

            const double cap = g.capability_constant();
            const double w = 2.0 * v(b) * v(b) / (g.e_star * g.e_star) - 1.0;
            res(row) = cap * (q_inv - q_ref) - 1.0 + w * w;
            if (jac) {
                add_power_derivatives(row, b, 0.0, cap);
                (*jac)(row, v_slot(b)) += 2.0 * w * 4.0 * v(b) / (g.e_star * g.e_star);
            }
            ++row;
        }
        return res;
    }
};

bool newton_solve(const NewtonProblem& prob, Eigen::VectorXd& x, int* iterations) {
    Eigen::MatrixXd jac;
    Eigen::VectorXd res = prob.residual(x, &jac);
    double res_norm = res.lpNorm<Eigen::Infinity>();
    for (int iter = 0; iter < kMaxIterations; ++iter) {
        if (iterations)
            *iterations = iter;
        if (res_norm <= kTolerance)
            return true;
        const Eigen::VectorXd dx = jac.partialPivLu().solve(-res);
        if (!dx.allFinite())
            return false;

        double scale = 1.0;
        bool accepted = false;
        for (int half = 0; half < 8; ++half) {
            Eigen::VectorXd x_try = x + scale * dx;
            // Voltage magnitudes must stay positive.
            bool valid = true;
            for (int i = 0; i < prob.n; ++i)
                if (x_try(prob.v_slot(i)) < 0.05)
                    valid = false;
            if (valid) {
                Eigen::MatrixXd jac_try;
                Eigen::VectorXd res_try = prob.residual(x_try, &jac_try);
                const double norm_try = res_try.lpNorm<Eigen::Infinity>();
                if (norm_try < res_norm || norm_try <= kTolerance) {
                    x = x_try;
                    res = res_try;
                    jac = jac_try;
                    res_norm = norm_try;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if (!accepted)
            return false;
    }
    return res_norm <= kTolerance;
}

Eigen::VectorXd flat_start(const NewtonProblem& prob) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(prob.dim());
    for (int i = 0; i < prob.n; ++i)
        x(prob.v_slot(i)) = 1.0;
    for (const GfmParams& g : prob.model.gfm)
        x(prob.v_slot(g.bus)) = g.e_star;
    x(prob.omega_slot()) = prob.model.omega_star;
    return x;
}

} // namespace

OperatingPoint solve_steady_state(const NetworkModel& model,
                                  const Eigen::VectorXd& setpoints,
                                  const LoadSet& loads,
                                  const Eigen::VectorXd& pv_available,
                                  const OperatingPoint* warm_start) {
    const int m = model.der_count();
    if (setpoints.size() != 2 * m)
        throw Error("solve_steady_state: setpoint vector must have length 2m");
    if (loads.p.size() != model.bus_count() || loads.q.size() != model.bus_count())
        throw Error("solve_steady_state: load vector length mismatch");
    if (pv_available.size() != m)
        throw Error("solve_steady_state: pv_available must be sized per DER");

    NewtonProblem prob(model, setpoints, loads, pv_available);

    Eigen::VectorXd x;
    bool solved = false;
    int iterations = 0;
    if (warm_start && warm_start->v_mag.size() == model.bus_count()) {
        x = Eigen::VectorXd(prob.dim());
        for (int i = 0; i < prob.n; ++i) {
            if (i != prob.ref_bus)
                x(prob.theta_slot[static_cast<std::size_t>(i)]) =
                    warm_start->v_ang(i) - warm_start->v_ang(prob.ref_bus);
            x(prob.v_slot(i)) = warm_start->v_mag(i);
        }
        x(prob.omega_slot()) = warm_start->omega;
        solved = newton_solve(prob, x, &iterations);
    }
    if (!solved) {
        x = flat_start(prob);
        solved = newton_solve(prob, x, &iterations);
    }
    if (!solved)
        throw SolveError("solve_steady_state: Newton iteration did not converge "
                         "(operating point may be infeasible)");

    OperatingPoint point;
    point.v_ang = prob.unpack_theta(x);
    point.v_mag = prob.unpack_v(x);
    point.omega = x(prob.omega_slot());
    point.iterations = iterations;

    // Capability check: the solution must lie on the physical branch of the
    // droop voltage relation with a nonnegative square-root argument.
    const Injections inj = bus_injections(model.ybus, point.v_mag, point.v_ang);
    const GflGeneration gen = gfl_generation(model, setpoints, pv_available);
    for (std::size_t gi = 0; gi < model.gfm.size(); ++gi) {
        const GfmParams& g = model.gfm[gi];
        int der_index = -1;
        for (int d = 0; d < m; ++d)
            if (model.ders[static_cast<std::size_t>(d)].gfm_index == static_cast<int>(gi))
                der_index = d;
        const double q_inv = inj.q(g.bus) + loads.q(g.bus) - gen.q(g.bus);
        const double arg = 1.0 - g.capability_constant() * (q_inv - setpoints(m + der_index));
        if (arg < -1e-12)
            throw InfeasibleError("solve_steady_state: reactive droop capability exceeded");
        if (point.v_mag(g.bus) < g.e_star / std::sqrt(2.0) - 1e-9)
            throw InfeasibleError("solve_steady_state: converged to non-physical voltage branch");
    }

    point.der_p.resize(m);
    point.der_q.resize(m);
    for (int d = 0; d < m; ++d) {
        const Der& der = model.ders[static_cast<std::size_t>(d)];
        if (der.is_gfm()) {
            point.der_p(d) = inj.p(der.bus) + loads.p(der.bus) - gen.p(der.bus);
            point.der_q(d) = inj.q(der.bus) + loads.q(der.bus) - gen.q(der.bus);
        } else {
            point.der_p(d) = std::min(setpoints(d), pv_available(d));
            point.der_q(d) = setpoints(m + d);
        }
    }

    Eigen::VectorXd res = prob.residual(x, nullptr);
    point.max_mismatch = res.lpNorm<Eigen::Infinity>();
    return point;
}

double power_balance_residual(const NetworkModel& model, const OperatingPoint& point,
                              const Eigen::VectorXd& setpoints, const LoadSet& loads,
                              const Eigen::VectorXd& pv_available) {
    const Injections inj = bus_injections(model.ybus, point.v_mag, point.v_ang);
    const GflGeneration gen = gfl_generation(model, setpoints, pv_available);
    const int m = model.der_count();

    Eigen::VectorXd gen_p = gen.p;
    Eigen::VectorXd gen_q = gen.q;
    for (int d = 0; d < m; ++d) {
        const Der& der = model.ders[static_cast<std::size_t>(d)];
        if (der.is_gfm()) {
            gen_p(der.bus) += point.der_p(d);
            gen_q(der.bus) += point.der_q(d);
        }
    }
    double worst = 0.0;
    for (int i = 0; i < model.bus_count(); ++i) {
        worst = std::max(worst, std::abs(inj.p(i) - gen_p(i) + loads.p(i)));
        worst = std::max(worst, std::abs(inj.q(i) - gen_q(i) + loads.q(i)));
    }
    return worst;
}

double droop_relation_residual(const NetworkModel& model, const OperatingPoint& point,
                               const Eigen::VectorXd& setpoints) {
    const int m = model.der_count();
    double worst = 0.0;
    for (int d = 0; d < m; ++d) {
        const Der& der = model.ders[static_cast<std::size_t>(d)];
        if (!der.is_gfm())
            continue;
        const GfmParams& g = model.gfm[static_cast<std::size_t>(der.gfm_index)];
        const double e = point.v_mag(g.bus);
        const double dq = point.der_q(d) - setpoints(m + d);
        const double dp = point.der_p(d) - setpoints(d);

        const double arg = 1.0 - g.capability_constant() * dq;
        if (arg >= 0.0) {
            const double e_ss =
                (g.e_star / std::sqrt(2.0)) * std::sqrt(1.0 + std::sqrt(arg));
            worst = std::max(worst, std::abs(e - e_ss));
        } else {
            worst = std::max(worst, std::abs(arg));
        }
        const double omega_ss =
            model.omega_star - g.r_f * g.e_star * g.e_star / (e * e) * dp;
        worst = std::max(worst, std::abs(point.omega - omega_ss));
    }
    return worst;
}

double branch_flow_from(const NetworkModel& model, const OperatingPoint& point,
                        int branch_index) {
    const Branch& br = model.branches.at(static_cast<std::size_t>(branch_index));
    const std::complex<double> y(br.g, br.b);
    const std::complex<double> ysh(0.0, 0.5 * br.b_charge);
    const double t = br.tap;
    const std::complex<double> vf =
        std::polar(point.v_mag(br.from), point.v_ang(br.from));
    const std::complex<double> vt = std::polar(point.v_mag(br.to), point.v_ang(br.to));
    const std::complex<double> i_from = (y + ysh) / (t * t) * vf - y / t * vt;
    return (vf * std::conj(i_from)).real();
}

Eigen::VectorXd SystemOutput::as_vector() const {
    Eigen::VectorXd out(1 + v.size() + p.size());
    out(0) = omega_hz;
    out.segment(1, v.size()) = v;
    out.segment(1 + v.size(), p.size()) = p;
    return out;
}

SystemOutput measure_output(const NetworkModel& model, const OperatingPoint& point,
                            const Eigen::VectorXd* noise_std, Rng* rng) {
    SystemOutput out;
    out.omega_hz = rad_to_hz(point.omega);
    out.v.resize(static_cast<Eigen::Index>(model.critical_buses.size()));
    for (std::size_t i = 0; i < model.critical_buses.size(); ++i)
        out.v(static_cast<Eigen::Index>(i)) =
            point.v_mag(model.critical_buses[i]);
    out.p.resize(static_cast<Eigen::Index>(model.critical_lines.size()));
    for (std::size_t i = 0; i < model.critical_lines.size(); ++i)
        out.p(static_cast<Eigen::Index>(i)) =
            branch_flow_from(model, point, model.critical_lines[i]);

    if (noise_std && rng) {
        if (noise_std->size() != 1 + out.v.size() + out.p.size())
            throw Error("measure_output: noise vector length mismatch");
        out.omega_hz += rng->gaussian(0.0, (*noise_std)(0));
        for (Eigen::Index i = 0; i < out.v.size(); ++i)
            out.v(i) += rng->gaussian(0.0, (*noise_std)(1 + i));
        for (Eigen::Index i = 0; i < out.p.size(); ++i)
            out.p(i) += rng->gaussian(0.0, (*noise_std)(1 + out.v.size() + i));
    }
    return out;
}

} // namespace dersec
