#include "dersec/box_ls.hpp"

#include "dersec/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace dersec {

namespace {

Eigen::VectorXd clamp(const Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                      const Eigen::VectorXd& hi) {
    return x.cwiseMax(lo).cwiseMin(hi);
}

/// Inf-norm of the projected gradient: interior coordinates contribute the
/// raw gradient, coordinates at a bound only the infeasible-sign part.
double projected_gradient_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                               const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (lo(i) == hi(i))
            continue;  // pinned coordinate: no feasible direction
        double gi = g(i);
        if (x(i) <= lo(i)) {
            gi = std::min(gi, 0.0);
        } else if (x(i) >= hi(i)) {
            gi = std::max(gi, 0.0);
        }
        worst = std::max(worst, std::abs(gi));
    }
    return worst;
}

} // namespace

BoxLsResult solve_box_ls(const BoxLsProblem& problem) {
    const Eigen::Index n = problem.A.cols();
    if (problem.b.size() != problem.A.rows())
        throw Error("solve_box_ls: b length does not match A rows");
    if (problem.lower.size() != n || problem.upper.size() != n)
        throw Error("solve_box_ls: bound length does not match A cols");
    if ((problem.lower.array() > problem.upper.array()).any())
        throw Error("solve_box_ls: lower bound exceeds upper bound");
    if (problem.rho < 0.0)
        throw Error("solve_box_ls: negative ridge weight");

    const double ridge = problem.rho > 0.0 ? problem.rho : 1e-8;

    const Eigen::MatrixXd AtA = problem.A.transpose() * problem.A;
    const Eigen::VectorXd Atb = problem.A.transpose() * problem.b;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(AtA);
    const double lip = 2.0 * (std::max(eig.eigenvalues().maxCoeff(), 0.0) + ridge);
    const double step = 1.0 / lip;

    auto grad = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
        return 2.0 * (AtA * x - Atb + ridge * x);
    };
    auto value = [&](const Eigen::VectorXd& x) -> double {
        return (problem.A * x - problem.b).squaredNorm() + ridge * x.squaredNorm();
    };

    const Eigen::VectorXd& lo = problem.lower;
    const Eigen::VectorXd& hi = problem.upper;

    Eigen::VectorXd x = clamp(Eigen::VectorXd::Zero(n), lo, hi);
    Eigen::VectorXd y = x;
    double fx = value(x);
    double theta = 1.0;

    constexpr int kMaxIter = 100000;
    constexpr double kPgTol = 1e-9;

    // Exact minimization over the coordinates the projected iterate leaves
    // free, with the bound-pinned coordinates fixed. Near-singular curvature
    // directions (the rho = 0 tie-break regime) converge immediately here,
    // where a pure first-order sweep would crawl.
    auto subspace_refine = [&](Eigen::VectorXd& xio, double& fio) {
        const Eigen::VectorXd g = grad(xio);
        std::vector<Eigen::Index> free;
        for (Eigen::Index i = 0; i < n; ++i) {
            const bool at_lo = xio(i) <= lo(i) && g(i) >= 0.0;
            const bool at_hi = xio(i) >= hi(i) && g(i) <= 0.0;
            if (!(at_lo || at_hi))
                free.push_back(i);
        }
        if (free.empty())
            return false;
        Eigen::MatrixXd h_ff(free.size(), free.size());
        Eigen::VectorXd rhs(free.size());
        for (std::size_t r = 0; r < free.size(); ++r) {
            rhs(static_cast<Eigen::Index>(r)) = Atb(free[r]);
            for (std::size_t c = 0; c < free.size(); ++c)
                h_ff(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                    AtA(free[r], free[c]) + (free[r] == free[c] ? ridge : 0.0);
            // Move the contribution of the fixed coordinates to the rhs.
            for (Eigen::Index i = 0; i < n; ++i) {
                if (std::find(free.begin(), free.end(), i) == free.end())
                    rhs(static_cast<Eigen::Index>(r)) -= AtA(free[r], i) * xio(i);
            }
        }
        const Eigen::VectorXd xf = h_ff.ldlt().solve(rhs);
        Eigen::VectorXd trial = xio;
        for (std::size_t r = 0; r < free.size(); ++r)
            trial(free[r]) = xf(static_cast<Eigen::Index>(r));
        trial = clamp(trial, lo, hi);
        const double ft = value(trial);
        if (ft <= fio) {
            xio = trial;
            fio = ft;
            return true;
        }
        return false;
    };

    BoxLsResult result;
    result.kkt_residual = projected_gradient_norm(x, grad(x), lo, hi);

    int iter = 0;
    while (result.kkt_residual > kPgTol && iter < kMaxIter) {
        ++iter;
        Eigen::VectorXd z = clamp(y - step * grad(y), lo, hi);
        double fz = value(z);
        if (fz > fx) {
            // Momentum overshot; plain projected step from x is a descent step.
            z = clamp(x - step * grad(x), lo, hi);
            fz = value(z);
            theta = 1.0;
            y = z;
        }
        const double theta_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * theta * theta));
        y = z + ((theta - 1.0) / theta_next) * (z - x);
        x = z;
        fx = fz;
        theta = theta_next;
        if (iter % 25 == 0 && subspace_refine(x, fx)) {
            y = x;
            theta = 1.0;
        }
        result.kkt_residual = projected_gradient_norm(x, grad(x), lo, hi);
    }

    result.x = x;
    result.iterations = iter;
    result.objective = (problem.A * x - problem.b).squaredNorm() + problem.rho * x.squaredNorm();
    result.converged = result.kkt_residual <= 1e-6;
    return result;
}

Eigen::MatrixXd null_space_basis(const Eigen::MatrixXd& M, double rel_tol) {
    const Eigen::Index n = M.cols();
    if (M.rows() == 0 || n == 0)
        return Eigen::MatrixXd::Identity(n, n);

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullV);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double sigma_max = sv.size() > 0 ? sv(0) : 0.0;
    const double cutoff = rel_tol * sigma_max;

    Eigen::Index rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > cutoff && sv(i) > 0.0)
            ++rank;

    return svd.matrixV().rightCols(n - rank);
}

Eigen::VectorXd solve_ls_ineq(const Eigen::MatrixXd& D, const Eigen::VectorXd& f,
                              const Eigen::MatrixXd& G, const Eigen::VectorXd& h,
                              const Eigen::VectorXd& x0) {
    const Eigen::Index n = D.cols();
    const Eigen::Index nc = G.rows();
    if (f.size() != D.rows() || G.cols() != n || h.size() != nc || x0.size() != n)
        throw Error("solve_ls_ineq: inconsistent dimensions");

    const Eigen::MatrixXd H = 2.0 * D.transpose() * D;
    const Eigen::VectorXd c = -2.0 * D.transpose() * f;

    Eigen::VectorXd x = x0;
    if (nc > 0 && ((G * x - h).array() > 1e-9).any())
        throw Error("solve_ls_ineq: infeasible starting point");

    std::vector<Eigen::Index> working;
    const double scale = std::max(1.0, x0.cwiseAbs().maxCoeff());

    constexpr int kMaxIter = 500;
    for (int iter = 0; iter < kMaxIter; ++iter) {
        // Equality-constrained step on the working set via null-space method.
        Eigen::VectorXd g = H * x + c;
        Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
        if (working.empty()) {
            p = H.ldlt().solve(-g);
        } else {
            Eigen::MatrixXd Gw(working.size(), n);
            for (std::size_t r = 0; r < working.size(); ++r)
                Gw.row(static_cast<Eigen::Index>(r)) = G.row(working[r]);
            const Eigen::MatrixXd Z = null_space_basis(Gw);
            if (Z.cols() > 0) {
                const Eigen::MatrixXd Hz = Z.transpose() * H * Z;
                const Eigen::VectorXd gz = Z.transpose() * g;
                p = Z * Hz.ldlt().solve(-gz);
            }
        }

        if (p.lpNorm<Eigen::Infinity>() <= 1e-12 * std::max(1.0, scale)) {
            if (working.empty())
                return x;
            // Multipliers for G_w' lambda = -(Hx + c); drop the most negative.
            Eigen::MatrixXd Gw(working.size(), n);
            for (std::size_t r = 0; r < working.size(); ++r)
                Gw.row(static_cast<Eigen::Index>(r)) = G.row(working[r]);
            const Eigen::VectorXd lambda =
                Gw.transpose().colPivHouseholderQr().solve(-(H * x + c));
            Eigen::Index drop = -1;
            double most_negative = -1e-9;
            for (Eigen::Index r = 0; r < lambda.size(); ++r) {
                if (lambda(r) < most_negative) {
                    most_negative = lambda(r);
                    drop = r;
                }
            }
            if (drop < 0)
                return x;
            working.erase(working.begin() + drop);
            continue;
        }

        // Step length limited by the nearest inactive constraint.
        double alpha = 1.0;
        Eigen::Index blocking = -1;
        for (Eigen::Index i = 0; i < nc; ++i) {
            if (std::find(working.begin(), working.end(), i) != working.end())
                continue;
            const double gp = G.row(i).dot(p);
            if (gp > 1e-14) {
                const double room = (h(i) - G.row(i).dot(x)) / gp;
                if (room < alpha) {
                    alpha = std::max(room, 0.0);
                    blocking = i;
                }
            }
        }
        x += alpha * p;
        if (blocking >= 0) {
            working.push_back(blocking);
            // Snap the new active constraint to equality to avoid drift.
        }
    }
    throw SolveError("solve_ls_ineq: active-set iteration cap reached");
}

} // namespace dersec
