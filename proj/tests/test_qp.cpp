#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "mkoop/qp.hpp"

using namespace mkoop::qp;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

MatrixXd random_spd(int n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
    return a * a.transpose() + 0.1 * MatrixXd::Identity(n, n);
}

}  // namespace

TEST_CASE("random boxed QPs satisfy KKT") {
    std::mt19937_64 rng(42);
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<int> size(1, 12);
    int solved = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = size(rng);
        QpProblem qp = QpProblem::unconstrained(random_spd(n, rng), VectorXd::Zero(n));
        for (int i = 0; i < n; ++i) {
            qp.f[i] = 3.0 * nd(rng);
            qp.lb[i] = -std::abs(nd(rng));
            qp.ub[i] = std::abs(nd(rng));
        }
        const auto r = solve_qp(qp);
        if (r.status == QpStatus::solved) ++solved;
        const auto kkt = kkt_residuals(qp, r.x, r.y);
        worst = std::max(worst, kkt.max());
        CHECK((r.x.array() >= qp.lb.array()).all());
        CHECK((r.x.array() <= qp.ub.array()).all());
    }
    CHECK(solved == 100);
    CHECK(worst < 1e-6);
}

TEST_CASE("random QPs with general rows satisfy KKT") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 6, rows = 4;
        QpProblem qp = QpProblem::unconstrained(random_spd(n, rng), VectorXd::Zero(n));
        for (int i = 0; i < n; ++i) qp.f[i] = 3.0 * nd(rng);
        qp.G.resize(rows, n);
        for (Eigen::Index i = 0; i < qp.G.size(); ++i) qp.G.data()[i] = nd(rng);
        qp.g_lo = VectorXd::Constant(rows, -0.5);
        qp.g_hi = VectorXd::Constant(rows, 0.5);
        const auto r = solve_qp(qp);
        CHECK(r.status == QpStatus::solved);
        CHECK(kkt_residuals(qp, r.x, r.y).max() < 1e-6);
    }
}

TEST_CASE("unconstrained QP equals the dense solve") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    const MatrixXd h = random_spd(8, rng);
    VectorXd f(8);
    for (int i = 0; i < 8; ++i) f[i] = nd(rng);
    const auto r = solve_qp(QpProblem::unconstrained(h, f));
    const VectorXd x = h.ldlt().solve(-f);
    CHECK((r.x - x).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(r.objective == doctest::Approx(0.5 * x.dot(h * x) + f.dot(x)));
}

TEST_CASE("active bound is hit exactly") {
    // min (u - 2)^2 subject to u <= 0.5.
    QpProblem qp = QpProblem::unconstrained(MatrixXd::Constant(1, 1, 2.0), VectorXd::Constant(1, -4.0));
    qp.ub[0] = 0.5;
    const auto r = solve_qp(qp);
    CHECK(r.status == QpStatus::solved);
    CHECK(r.x[0] == 0.5);
    CHECK(r.y[0] > 0.0);
    CHECK(r.y[0] == doctest::Approx(3.0));
}

TEST_CASE("infeasible problems are detected") {
    QpProblem qp = QpProblem::unconstrained(MatrixXd::Identity(2, 2), VectorXd::Zero(2));
    qp.G.resize(2, 2);
    qp.G << 1, 1, 1, 1;
    qp.g_lo = Eigen::Vector2d(1.0, -kInf);
    qp.g_hi = Eigen::Vector2d(kInf, -1.0);
    const auto r = solve_qp(qp);
    CHECK(r.status == QpStatus::infeasible);
}

TEST_CASE("solver reuse with new linear costs") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd;
    QpProblem qp = QpProblem::unconstrained(random_spd(5, rng), VectorXd::Zero(5));
    qp.lb = VectorXd::Constant(5, -0.3);
    qp.ub = VectorXd::Constant(5, 0.3);
    QpSolver solver(qp);
    for (int k = 0; k < 10; ++k) {
        VectorXd f(5);
        for (int i = 0; i < 5; ++i) f[i] = nd(rng);
        solver.update_linear_cost(f);
        const auto warm = solver.solve();
        QpProblem fresh = qp;
        fresh.f = f;
        const auto cold = solve_qp(fresh);
        CHECK((warm.x - cold.x).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("malformed problems are rejected") {
    QpProblem qp = QpProblem::unconstrained(MatrixXd::Identity(2, 2), VectorXd::Zero(2));
    qp.lb[0] = 1.0;
    qp.ub[0] = 0.0;
    CHECK_THROWS(qp.validate());
    CHECK_THROWS(solve_qp(QpProblem::unconstrained(MatrixXd::Identity(2, 2), VectorXd::Zero(3))));
}
