#include "mkoop/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace mkoop::qp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kRhoMin = 1e-6;
constexpr double kRhoMax = 1e6;
constexpr double kEqualityScale = 1e3;

double inf_norm(const VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

std::string to_string(QpStatus s) {
    switch (s) {
        case QpStatus::solved: return "solved";
        case QpStatus::inaccurate: return "inaccurate";
        case QpStatus::infeasible: return "infeasible";
    }
    return "inaccurate";
}

double KktResiduals::max() const { return std::max({stationarity, primal, dual, complementarity}); }

QpProblem QpProblem::unconstrained(const MatrixXd& H, const VectorXd& f) {
    QpProblem qp;
    qp.H = H;
    qp.f = f;
    qp.lb = VectorXd::Constant(f.size(), -kInf);
    qp.ub = VectorXd::Constant(f.size(), kInf);
    qp.G.resize(0, f.size());
    return qp;
}

void QpProblem::validate() const {
    const auto n = H.rows();
    if (H.cols() != n || f.size() != n || lb.size() != n || ub.size() != n) {
        throw std::invalid_argument("qp: cost and box dimensions disagree");
    }
    if (G.cols() != n && G.rows() > 0) throw std::invalid_argument("qp: G column count differs from H");
    if (g_lo.size() != G.rows() || g_hi.size() != G.rows()) throw std::invalid_argument("qp: G bound sizes");
    if (!H.allFinite() || !f.allFinite() || !G.allFinite()) throw std::invalid_argument("qp: non-finite data");
    if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, H.cwiseAbs().maxCoeff())) {
        throw std::invalid_argument("qp: H is not symmetric");
    }
    if ((lb.array() > ub.array()).any() || (g_lo.array() > g_hi.array()).any()) {
        throw std::invalid_argument("qp: lower bound exceeds upper bound");
    }
}

double objective(const QpProblem& qp, const VectorXd& x) { return 0.5 * x.dot(qp.H * x) + qp.f.dot(x); }

KktResiduals kkt_residuals(const QpProblem& qp, const VectorXd& x, const VectorXd& y) {
    const auto n = qp.H.rows();
    const auto mg = qp.G.rows();
    KktResiduals r;
    VectorXd grad = qp.H * x + qp.f + y.head(n);
    if (mg > 0) grad += qp.G.transpose() * y.tail(mg);
    r.stationarity = inf_norm(grad);
    auto row = [&](double v, double lo, double hi, double yi) {
        r.primal = std::max({r.primal, v - hi, lo - v, 0.0});
        if (yi > 0.0) {
            if (std::isinf(hi)) r.dual = std::max(r.dual, yi);
            else r.complementarity = std::max(r.complementarity, yi * std::abs(hi - v));
        } else if (yi < 0.0) {
            if (std::isinf(lo)) r.dual = std::max(r.dual, -yi);
            else r.complementarity = std::max(r.complementarity, -yi * std::abs(v - lo));
        }
    };
    for (Eigen::Index i = 0; i < n; ++i) row(x[i], qp.lb[i], qp.ub[i], y[i]);
    if (mg > 0) {
        const VectorXd gx = qp.G * x;
        for (Eigen::Index i = 0; i < mg; ++i) row(gx[i], qp.g_lo[i], qp.g_hi[i], y[n + i]);
    }
    return r;
}

QpSolver::QpSolver(QpProblem problem, QpSettings settings)
    : qp_(std::move(problem)), settings_(settings), rho_(settings.rho) {
    if (qp_.G.rows() == 0) qp_.G.resize(0, qp_.H.rows());
    qp_.validate();
    if (!(settings_.rho > 0.0) || !(settings_.sigma > 0.0) || !(settings_.alpha > 0.0 && settings_.alpha < 2.0)) {
        throw std::invalid_argument("qp: invalid solver settings");
    }
    const auto n = qp_.H.rows();
    c_.resize(n + qp_.G.rows(), n);
    c_.topRows(n).setIdentity();
    c_.bottomRows(qp_.G.rows()) = qp_.G;
    stack_bounds();
    factor();
}

void QpSolver::stack_bounds() {
    const auto rows = c_.rows();
    lo_.resize(rows);
    hi_.resize(rows);
    lo_ << qp_.lb, qp_.g_lo;
    hi_ << qp_.ub, qp_.g_hi;
}

void QpSolver::factor() {
    const auto rows = c_.rows();
    rho_vec_.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (std::isinf(lo_[i]) && std::isinf(hi_[i])) rho_vec_[i] = kRhoMin;
        else if (lo_[i] == hi_[i]) rho_vec_[i] = kEqualityScale * rho_;
        else rho_vec_[i] = rho_;
    }
    MatrixXd k = qp_.H;
    k.diagonal().array() += settings_.sigma;
    k.noalias() += c_.transpose() * rho_vec_.asDiagonal() * c_;
    kkt_.compute(k);
    if (kkt_.info() != Eigen::Success) throw std::runtime_error("qp: KKT factorization failed");
}

void QpSolver::update_linear_cost(const VectorXd& f) {
    if (f.size() != qp_.f.size() || !f.allFinite()) throw std::invalid_argument("qp: bad linear cost");
    qp_.f = f;
}

void QpSolver::update_bounds(const VectorXd& lb, const VectorXd& ub, const VectorXd& g_lo, const VectorXd& g_hi) {
    QpProblem next = qp_;
    next.lb = lb;
    next.ub = ub;
    next.g_lo = g_lo;
    next.g_hi = g_hi;
    next.validate();
    qp_ = std::move(next);
    stack_bounds();
    factor();
}

QpResult QpSolver::solve(const VectorXd& x_warm, const VectorXd& y_warm) {
    const auto n = qp_.H.rows();
    const auto rows = c_.rows();
    const double alpha = settings_.alpha;
    const double sigma = settings_.sigma;

    VectorXd x = x_warm.size() == n ? x_warm : VectorXd::Zero(n);
    VectorXd y = y_warm.size() == rows ? y_warm : VectorXd::Zero(rows);
    VectorXd z = (c_ * x).cwiseMax(lo_).cwiseMin(hi_);
    VectorXd x_prev, z_prev, y_prev, delta_y, delta_x;

    QpResult r;
    r.status = QpStatus::inaccurate;
    for (int it = 1; it <= settings_.max_iter; ++it) {
        x_prev = x;
        z_prev = z;
        y_prev = y;
        const VectorXd rhs = sigma * x - qp_.f + c_.transpose() * (rho_vec_.cwiseProduct(z) - y);
        const VectorXd x_tilde = kkt_.solve(rhs);
        const VectorXd z_tilde = c_ * x_tilde;
        x = alpha * x_tilde + (1.0 - alpha) * x_prev;
        const VectorXd z_relaxed = alpha * z_tilde + (1.0 - alpha) * z_prev;
        z = (z_relaxed + y.cwiseQuotient(rho_vec_)).cwiseMax(lo_).cwiseMin(hi_);
        y += rho_vec_.cwiseProduct(z_relaxed - z);
        r.iterations = it;

        const VectorXd cx = c_ * x;
        const VectorXd hx = qp_.H * x;
        const VectorXd cty = c_.transpose() * y;
        const double r_prim = inf_norm(cx - z);
        const double r_dual = inf_norm(hx + qp_.f + cty);
        const double eps_prim = settings_.eps_abs + settings_.eps_rel * std::max(inf_norm(cx), inf_norm(z));
        const double eps_dual =
            settings_.eps_abs + settings_.eps_rel * std::max({inf_norm(hx), inf_norm(cty), inf_norm(qp_.f)});
        if (r_prim <= eps_prim && r_dual <= eps_dual) {
            r.status = QpStatus::solved;
            break;
        }

        // Primal infeasibility certificate: C' dy ~ 0 with a separating support value.
        delta_y = y - y_prev;
        const double dy_norm = inf_norm(delta_y);
        if (dy_norm > 0.0) {
            const double eps = settings_.eps_infeasible * dy_norm;
            if (inf_norm(c_.transpose() * delta_y) <= eps) {
                double support = 0.0;
                bool finite = true;
                for (Eigen::Index i = 0; i < rows; ++i) {
                    if (delta_y[i] > 0.0) {
                        if (std::isinf(hi_[i])) finite = false;
                        else support += hi_[i] * delta_y[i];
                    } else if (delta_y[i] < 0.0) {
                        if (std::isinf(lo_[i])) finite = false;
                        else support += lo_[i] * delta_y[i];
                    }
                }
                if (finite && support < -eps) {
                    r.status = QpStatus::infeasible;
                    break;
                }
            }
        }

        if (settings_.adaptive_rho && it % settings_.adaptive_rho_interval == 0) {
            const double prim_scale = std::max({inf_norm(cx), inf_norm(z), 1e-30});
            const double dual_scale = std::max({inf_norm(hx), inf_norm(cty), inf_norm(qp_.f), 1e-30});
            const double ratio = (r_prim / prim_scale) / std::max(r_dual / dual_scale, 1e-30);
            const double rho_new = std::clamp(rho_ * std::sqrt(ratio), kRhoMin, kRhoMax);
            if (rho_new > 5.0 * rho_ || rho_new < 0.2 * rho_) {
                rho_ = rho_new;
                factor();
            }
        }
    }

    r.x = x;
    r.y = y;
    if (r.status != QpStatus::infeasible && settings_.polish) r.polished = polish(r);
    if (r.status != QpStatus::infeasible) {
        // Box rows hold exactly; a projection of at most the solver tolerance.
        r.x = r.x.cwiseMax(qp_.lb).cwiseMin(qp_.ub);
    }
    r.residuals = kkt_residuals(qp_, r.x, r.y);
    r.objective = objective(qp_, r.x);
    if (r.status == QpStatus::inaccurate && r.polished) r.status = QpStatus::solved;
    return r;
}

bool QpSolver::polish(QpResult& r) const {
    const auto n = qp_.H.rows();
    const auto rows = c_.rows();
    const double scale = std::max(1.0, inf_norm(qp_.f));
    const double tol = 1e-7 * scale;

    // 0 = free, -1 = lower active, +1 = upper active, 2 = equality.
    std::vector<int> state(static_cast<std::size_t>(rows), 0);
    const VectorXd cx = c_ * r.x;
    for (Eigen::Index i = 0; i < rows; ++i) {
        auto& s = state[static_cast<std::size_t>(i)];
        if (lo_[i] == hi_[i]) s = 2;
        else if (!std::isinf(lo_[i]) && (r.y[i] < -tol || cx[i] - lo_[i] < tol)) s = -1;
        else if (!std::isinf(hi_[i]) && (r.y[i] > tol || hi_[i] - cx[i] < tol)) s = 1;
    }

    const double feas_tol = 1e-9 * std::max(1.0, std::max(inf_norm(lo_.cwiseMax(-1e300).cwiseMin(1e300)),
                                                            inf_norm(hi_.cwiseMax(-1e300).cwiseMin(1e300))));
    for (int pass = 0; pass < settings_.polish_max_passes; ++pass) {
        std::vector<Eigen::Index> act;
        for (Eigen::Index i = 0; i < rows; ++i) {
            if (state[static_cast<std::size_t>(i)] != 0) act.push_back(i);
        }
        const auto na = static_cast<Eigen::Index>(act.size());
        MatrixXd kkt = MatrixXd::Zero(n + na, n + na);
        VectorXd rhs(n + na);
        kkt.topLeftCorner(n, n) = qp_.H;
        rhs.head(n) = -qp_.f;
        for (Eigen::Index k = 0; k < na; ++k) {
            const Eigen::Index i = act[static_cast<std::size_t>(k)];
            kkt.block(n + k, 0, 1, n) = c_.row(i);
            kkt.block(0, n + k, n, 1) = c_.row(i).transpose();
            const int s = state[static_cast<std::size_t>(i)];
            rhs[n + k] = s == -1 ? lo_[i] : hi_[i];
        }
        const Eigen::FullPivLU<MatrixXd> lu(kkt);
        if (!lu.isInvertible()) return false;
        VectorXd sol = lu.solve(rhs);
        for (int refine = 0; refine < 2; ++refine) sol += lu.solve(rhs - kkt * sol);
        const VectorXd x = sol.head(n);
        VectorXd y = VectorXd::Zero(rows);
        for (Eigen::Index k = 0; k < na; ++k) y[act[static_cast<std::size_t>(k)]] = sol[n + k];

        // Most violated inactive row and worst wrong-sign multiplier.
        const VectorXd cxp = c_ * x;
        Eigen::Index add = -1, drop = -1;
        double worst_violation = feas_tol, worst_sign = 1e-12 * scale;
        int add_side = 0;
        for (Eigen::Index i = 0; i < rows; ++i) {
            const int s = state[static_cast<std::size_t>(i)];
            if (s == 0) {
                if (cxp[i] - hi_[i] > worst_violation) {
                    worst_violation = cxp[i] - hi_[i];
                    add = i;
                    add_side = 1;
                }
                if (lo_[i] - cxp[i] > worst_violation) {
                    worst_violation = lo_[i] - cxp[i];
                    add = i;
                    add_side = -1;
                }
            } else if (s == 1 && -y[i] > worst_sign) {
                worst_sign = -y[i];
                drop = i;
            } else if (s == -1 && y[i] > worst_sign) {
                worst_sign = y[i];
                drop = i;
            }
        }
        if (add < 0 && drop < 0) {
            QpResult candidate = r;
            candidate.x = x;
            candidate.y = y;
            const auto before = kkt_residuals(qp_, r.x, r.y).max();
            const auto after = kkt_residuals(qp_, x, y).max();
            if (after <= std::max(before, 1e-12 * scale)) {
                r = std::move(candidate);
                return true;
            }
            return false;
        }
        if (add >= 0) state[static_cast<std::size_t>(add)] = add_side;
        else state[static_cast<std::size_t>(drop)] = 0;
    }
    return false;
}

QpResult solve_qp(const QpProblem& qp, const QpSettings& settings) {
    QpSolver solver(qp, settings);
    return solver.solve();
}

}  // namespace mkoop::qp
