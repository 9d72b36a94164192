#include "dersec/pv_curve.hpp"

#include "dersec/box_ls.hpp"
#include "dersec/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dersec {

namespace {

double poly_eval(const Eigen::VectorXd& coef, double x) {
    double acc = 0.0;
    for (Eigen::Index i = coef.size() - 1; i >= 0; --i)
        acc = acc * x + coef(i);
    return acc;
}

Eigen::VectorXd poly_derivative(const Eigen::VectorXd& coef) {
    if (coef.size() <= 1)
        return Eigen::VectorXd::Zero(1);
    Eigen::VectorXd d(coef.size() - 1);
    for (Eigen::Index i = 1; i < coef.size(); ++i)
        d(i - 1) = coef(i) * static_cast<double>(i);
    return d;
}

/// Real roots of a polynomial via the companion matrix of the trimmed
/// coefficient vector. Constant/zero polynomials yield no roots.
std::vector<double> poly_real_roots(const Eigen::VectorXd& coef) {
    Eigen::Index deg = coef.size() - 1;
    const double scale = coef.cwiseAbs().maxCoeff();
    if (scale == 0.0)
        return {};
    while (deg > 0 && std::abs(coef(deg)) < 1e-14 * scale)
        --deg;
    if (deg < 1)
        return {};
    Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
    for (Eigen::Index i = 0; i < deg; ++i)
        companion(i, deg - 1) = -coef(i) / coef(deg);
    companion.diagonal(-1).setOnes();
    Eigen::EigenSolver<Eigen::MatrixXd> eig(companion);
    std::vector<double> roots;
    for (Eigen::Index i = 0; i < deg; ++i) {
        const auto z = eig.eigenvalues()(i);
        if (std::abs(z.imag()) < 1e-8 * std::max(1.0, std::abs(z.real())))
            roots.push_back(z.real());
    }
    std::sort(roots.begin(), roots.end());
    return roots;
}

/// Expand sum_j b_j ((v - mid)/half)^j into monomials in v.
Eigen::VectorXd scaled_to_monomial(const Eigen::VectorXd& b, double mid, double half) {
    const Eigen::Index n = b.size();
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(n);
    // Binomial expansion of ((v - mid)/half)^j, coefficient of v^i.
    for (Eigen::Index j = 0; j < n; ++j) {
        double choose = 1.0;  // C(j, i), built incrementally
        for (Eigen::Index i = 0; i <= j; ++i) {
            if (i > 0)
                choose = choose * static_cast<double>(j - i + 1) / static_cast<double>(i);
            beta(i) += b(j) * choose * std::pow(-mid, static_cast<double>(j - i)) /
                       std::pow(half, static_cast<double>(j));
        }
    }
    return beta;
}

} // namespace

double PvCurve::value(double v) const { return poly_eval(beta, v); }

double PvCurve::derivative(double v) const { return poly_eval(poly_derivative(beta), v); }

double PvCurve::second_derivative(double v) const {
    return poly_eval(poly_derivative(poly_derivative(beta)), v);
}

bool PvCurve::concavity_certificate(int grid_points, double tol) const {
    const Eigen::VectorXd dd = poly_derivative(poly_derivative(beta));
    for (int g = 0; g < grid_points; ++g) {
        const double v =
            v_min + (v_max - v_min) * static_cast<double>(g) / (grid_points - 1);
        if (poly_eval(dd, v) > tol)
            return false;
    }
    return true;
}

PvCurve fit_concave_poly(const std::vector<std::pair<double, double>>& samples,
                         int degree, double v_min, double v_max) {
    if (degree < 1)
        throw Error("fit_concave_poly: degree must be at least 1");
    const Eigen::Index n = degree + 1;
    if (static_cast<Eigen::Index>(samples.size()) < n)
        throw Error("fit_concave_poly: need at least degree+1 samples");
    if (!(v_max > v_min))
        throw Error("fit_concave_poly: empty voltage domain");
    for (const auto& [v, p] : samples) {
        (void)p;
        if (v < v_min - 1e-9 || v > v_max + 1e-9)
            throw Error("fit_concave_poly: sample voltage outside domain");
    }

    // Work in the shifted/scaled variable s = (v - mid)/half for conditioning.
    const double mid = 0.5 * (v_min + v_max);
    const double half = 0.5 * (v_max - v_min);
    auto to_s = [&](double v) { return (v - mid) / half; };

    const Eigen::Index m = static_cast<Eigen::Index>(samples.size());
    Eigen::MatrixXd design(m, n);
    Eigen::VectorXd target(m);
    for (Eigen::Index r = 0; r < m; ++r) {
        const double s = to_s(samples[r].first);
        double pw = 1.0;
        for (Eigen::Index c = 0; c < n; ++c) {
            design(r, c) = pw;
            pw *= s;
        }
        target(r) = samples[r].second;
    }

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    qr.setThreshold(1e-9);
    if (qr.rank() < n)
        throw Error("fit_concave_poly: degenerate design matrix (voltages not distinct enough)");

    // Row of the c''(s) <= 0 constraint at grid slot s (positive scaling by
    // 1/half^2 dropped; it does not change feasibility).
    auto curvature_row = [&](double s) {
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n);
        for (Eigen::Index j = 2; j < n; ++j)
            row(j) = static_cast<double>(j) * static_cast<double>(j - 1) *
                     std::pow(s, static_cast<double>(j - 2));
        return row;
    };

    constexpr int kConstraintGrid = 64;
    constexpr int kCertificateGrid = 512;

    std::vector<double> constraint_s;
    constraint_s.reserve(kConstraintGrid + 8);
    for (int g = 0; g < kConstraintGrid; ++g)
        constraint_s.push_back(-1.0 + 2.0 * static_cast<double>(g) / (kConstraintGrid - 1));

    PvCurve curve;
    curve.degree = degree;
    curve.fit_window = static_cast<int>(samples.size());
    curve.v_min = v_min;
    curve.v_max = v_max;

    // A light ridge on the curvature-carrying coefficients conditions the
    // fit when the samples cluster in a narrow voltage band; for well-spread
    // samples its bias is far below the fit tolerances.
    const double p_scale = std::max(1e-6, target.cwiseAbs().maxCoeff());
    const double ridge = 1e-4 * p_scale;
    Eigen::MatrixXd design_reg(m + (n - 2), n);
    Eigen::VectorXd target_reg(m + (n - 2));
    design_reg.topRows(m) = design;
    target_reg.head(m) = target;
    design_reg.bottomRows(n - 2).setZero();
    target_reg.tail(n - 2).setZero();
    for (Eigen::Index j = 2; j < n; ++j)
        design_reg(m + j - 2, j) = ridge;

    for (int round = 0; round < 4; ++round) {
        Eigen::MatrixXd G(constraint_s.size(), n);
        for (std::size_t r = 0; r < constraint_s.size(); ++r)
            G.row(static_cast<Eigen::Index>(r)) = curvature_row(constraint_s[r]);
        const Eigen::VectorXd h = Eigen::VectorXd::Zero(G.rows());

        // beta = 0 has zero curvature everywhere, so it is always feasible.
        const Eigen::VectorXd b =
            solve_ls_ineq(design_reg, target_reg, G, h, Eigen::VectorXd::Zero(n));

        curve.beta = scaled_to_monomial(b, mid, half);
        curve.rmse = std::sqrt((design * b - target).squaredNorm() /
                               static_cast<double>(m));

        // Certificate on the denser grid; append violated points and refit.
        std::vector<double> violated;
        for (int g = 0; g < kCertificateGrid; ++g) {
            const double s = -1.0 + 2.0 * static_cast<double>(g) / (kCertificateGrid - 1);
            if (curvature_row(s).dot(b) > 1e-12)
                violated.push_back(s);
        }
        if (violated.empty() && curve.concavity_certificate())
            return curve;
        constraint_s.insert(constraint_s.end(), violated.begin(), violated.end());
    }
    throw SolveError("fit_concave_poly: concavity certificate not satisfied");
}

CurveCapacity estimate_capacity(const PvCurve& curve) {
    std::vector<double> candidates{curve.v_min, curve.v_max};
    for (double r : poly_real_roots(poly_derivative(curve.beta)))
        if (r > curve.v_min && r < curve.v_max)
            candidates.push_back(r);

    CurveCapacity best{curve.v_min, -std::numeric_limits<double>::infinity()};
    for (double v : candidates) {
        const double p = curve.value(v);
        if (p > best.p_max) {
            best.p_max = p;
            best.v_mpp = v;
        }
    }
    return best;
}

double track_voltage(const PvCurve& curve, double target_pu) {
    const CurveCapacity cap = estimate_capacity(curve);
    if (target_pu > cap.p_max)
        throw InfeasibleError("track_voltage: target exceeds curve capacity");

    // Prefer the high-voltage side of the maximizer; fall back to the low
    // side when the curve never comes down to the target there (monotone
    // curves with the maximum at the upper domain end).
    double lo, hi;  // bracket with c(lo) >= target >= c(hi)
    if (curve.value(curve.v_max) <= target_pu) {
        lo = cap.v_mpp;
        hi = curve.v_max;
    } else if (curve.value(curve.v_min) <= target_pu) {
        lo = cap.v_mpp;
        hi = curve.v_min;
    } else {
        throw InfeasibleError("track_voltage: target below curve value at both domain ends");
    }

    constexpr double kTol = 1e-9;
    constexpr int kMaxIter = 200;

    double v = hi;  // Newton starts at the domain end per the side convention
    double f = curve.value(v) - target_pu;
    for (int iter = 0; iter < kMaxIter; ++iter) {
        if (std::abs(f) <= kTol)
            return v;
        // Maintain the bracket.
        if (f > 0.0)
            lo = v;
        else
            hi = v;
        const double slope = curve.derivative(v);
        double next = (std::abs(slope) > 1e-14) ? v - f / slope : 0.5 * (lo + hi);
        // Reject Newton steps that leave the bracket.
        const double bmin = std::min(lo, hi);
        const double bmax = std::max(lo, hi);
        if (!(next >= bmin && next <= bmax))
            next = 0.5 * (lo + hi);
        v = next;
        f = curve.value(v) - target_pu;
    }
    if (std::abs(f) <= 1e-8)
        return v;
    throw SolveError("track_voltage: did not converge");
}

} // namespace dersec
