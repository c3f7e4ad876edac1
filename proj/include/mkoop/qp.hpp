#pragma once

// Dense convex QP solver based on ADMM operator splitting:
//
//   minimize    1/2 x' H x + f' x
//   subject to  lb <= x <= ub          (box rows)
//               g_lo <= G x <= g_hi    (general affine rows)
//
// The stacked constraint matrix is C = [I; G]. Multipliers follow the
// convention y > 0 on an active upper bound and y < 0 on an active lower bound.
// After ADMM converges an active-set polish solves the reduced KKT system so
// that residuals reach machine-level accuracy, and box rows are projected so
// that bounds hold exactly.

#include <Eigen/Dense>

#include <string>

namespace mkoop::qp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct QpProblem {
    MatrixXd H;  // symmetric positive semidefinite
    VectorXd f;
    VectorXd lb;  // box bounds; +-infinity when absent
    VectorXd ub;
    MatrixXd G;  // may have zero rows
    VectorXd g_lo;
    VectorXd g_hi;

    int variables() const { return static_cast<int>(H.rows()); }
    /// Unconstrained problem of the given size with infinite bounds.
    static QpProblem unconstrained(const MatrixXd& H, const VectorXd& f);
    void validate() const;
};

struct QpSettings {
    double eps_abs = 1e-9;
    double eps_rel = 1e-9;
    double eps_infeasible = 1e-7;
    int max_iter = 4000;
    double rho = 0.1;
    double sigma = 1e-6;
    double alpha = 1.6;
    bool adaptive_rho = true;
    int adaptive_rho_interval = 25;
    bool polish = true;
    int polish_max_passes = 25;
};

enum class QpStatus { solved, inaccurate, infeasible };
std::string to_string(QpStatus s);

struct KktResiduals {
    double stationarity = 0.0;     // ||H x + f + C' y||_inf
    double primal = 0.0;           // bound violation of C x
    double dual = 0.0;             // multiplier sign violations
    double complementarity = 0.0;  // |y_i| times slack of the matching bound
    double max() const;
};

struct QpResult {
    VectorXd x;
    VectorXd y;  // multipliers of the stacked rows [box; G]
    QpStatus status = QpStatus::inaccurate;
    int iterations = 0;
    bool polished = false;
    double objective = 0.0;
    KktResiduals residuals;
};

KktResiduals kkt_residuals(const QpProblem& qp, const VectorXd& x, const VectorXd& y);
double objective(const QpProblem& qp, const VectorXd& x);

/// Reusable solver: the factorization depends only on H, C and rho, so a
/// sequence of problems that change f (and optionally bounds) reuses it.
class QpSolver {
  public:
    QpSolver(QpProblem problem, QpSettings settings = {});

    const QpProblem& problem() const { return qp_; }
    void update_linear_cost(const VectorXd& f);
    void update_bounds(const VectorXd& lb, const VectorXd& ub, const VectorXd& g_lo, const VectorXd& g_hi);

    /// Warm start vectors may be empty.
    QpResult solve(const VectorXd& x_warm = {}, const VectorXd& y_warm = {});

  private:
    void stack_bounds();
    void factor();
    bool polish(QpResult& r) const;

    QpProblem qp_;
    QpSettings settings_;
    MatrixXd c_;  // stacked [I; G]
    VectorXd lo_;
    VectorXd hi_;
    VectorXd rho_vec_;
    double rho_;
    Eigen::LLT<MatrixXd> kkt_;
};

QpResult solve_qp(const QpProblem& qp, const QpSettings& settings = {});

}  // namespace mkoop::qp
