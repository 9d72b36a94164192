#pragma once

#include <Eigen/Dense>

namespace dersec {

/// min ||A x - b||^2 + rho ||x||^2  subject to  lower <= x <= upper.
/// When rho == 0 the solver adds an internal tie-break ridge of 1e-8 so the
/// minimizer is unique and reproducible even for wide A; the reported
/// objective excludes that ridge.
struct BoxLsProblem {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    double rho = 0.0;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
};

struct BoxLsResult {
    Eigen::VectorXd x;
    double objective = 0.0;     // ||Ax-b||^2 + rho||x||^2 (user rho only)
    double kkt_residual = 0.0;  // inf-norm of the projected gradient at x
    int iterations = 0;
    bool converged = false;     // kkt_residual <= 1e-6
};

/// Accelerated projected-gradient solve of a BoxLsProblem. Deterministic:
/// fixed start at clamp(0), fixed step 1/L, monotone restart scheme.
/// Terminates when the projected-gradient inf-norm drops below 1e-9 or at
/// 1e5 iterations; callers decide what to do with a non-converged result.
BoxLsResult solve_box_ls(const BoxLsProblem& problem);

/// Orthonormal basis of Null(M). Rank is decided by singular values below
/// rel_tol * sigma_max. Returns an n x 0 matrix when M has full column rank.
Eigen::MatrixXd null_space_basis(const Eigen::MatrixXd& M, double rel_tol = 1e-10);

/// min ||D x - f||^2 subject to G x <= h, via a primal active-set method.
/// Requires D'D positive definite and a feasible x0. Exact at termination
/// (active constraints hold to machine precision); throws SolveError on
/// cycling. Intended for small dense problems (curve fitting).
Eigen::VectorXd solve_ls_ineq(const Eigen::MatrixXd& D, const Eigen::VectorXd& f,
                              const Eigen::MatrixXd& G, const Eigen::VectorXd& h,
                              const Eigen::VectorXd& x0);

} // namespace dersec
