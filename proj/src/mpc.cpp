#include "mkoop/mpc.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

namespace mkoop::mpc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// JSON has no infinity; null entries (or |v| >= 1e300) stand for an absent bound.
VectorXd vector_or_empty(const nlohmann::json& j, const char* key, double fill = 0.0) {
    if (!j.contains(key) || j[key].is_null()) return {};
    std::vector<double> v;
    for (const auto& e : j[key]) {
        const double x = e.is_null() ? fill : e.get<double>();
        v.push_back(std::abs(x) >= 1e300 ? std::copysign(kInf, x) : x);
    }
    return Eigen::Map<VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json vector_json(const VectorXd& v) {
    if (v.size() == 0) return nullptr;
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (std::isinf(v[i])) out.push_back(v[i] > 0 ? 1e300 : -1e300);
        else out.push_back(v[i]);
    }
    return out;
}

VectorXd bound_or(const VectorXd& v, Eigen::Index size, double fill) {
    return v.size() == 0 ? VectorXd::Constant(size, fill) : v;
}

}  // namespace

void MpcConfig::validate(int n, int m) const {
    if (horizon < 1) throw std::invalid_argument("mpc.horizon: must be at least 1");
    if (position_weight < 0.0 || velocity_weight < 0.0) throw std::invalid_argument("mpc: state weights must be >= 0");
    if (!(input_weight > 0.0) && input_weights.size() == 0) throw std::invalid_argument("mpc.input_weight: must be > 0");
    if (state_weight.size() != 0 && (state_weight.size() != 2 * n || (state_weight.array() < 0.0).any())) {
        throw std::invalid_argument("mpc.state_weight: need 2n non-negative entries");
    }
    if (input_weights.size() != 0 && (input_weights.size() != m || (input_weights.array() <= 0.0).any())) {
        throw std::invalid_argument("mpc.input_weights: need m positive entries");
    }
    auto check = [](const VectorXd& lo, const VectorXd& hi, Eigen::Index size, const char* what) {
        if (lo.size() != 0 && lo.size() != size) throw std::invalid_argument(std::string(what) + ": lower bound size");
        if (hi.size() != 0 && hi.size() != size) throw std::invalid_argument(std::string(what) + ": upper bound size");
        if (lo.size() != 0 && hi.size() != 0 && (lo.array() > hi.array()).any()) {
            throw std::invalid_argument(std::string(what) + ": lower bound exceeds upper bound");
        }
    };
    check(x_min, x_max, 2 * n, "mpc.x_bounds");
    check(u_min, u_max, m, "mpc.u_bounds");
    if (!(tolerance > 0.0) || max_iterations < 1) throw std::invalid_argument("mpc: bad solver tolerance");
    if (geso && (!(k1 > 0.0) || !(k2 > 0.0))) throw std::invalid_argument("mpc.k1/k2: must be positive");
}

VectorXd MpcConfig::state_weights(int n) const {
    if (state_weight.size() == 2 * n) return state_weight;
    VectorXd w(2 * n);
    w << VectorXd::Constant(n, position_weight), VectorXd::Constant(n, velocity_weight);
    return w;
}

VectorXd MpcConfig::input_weight_vector(int m) const {
    return input_weights.size() == m ? input_weights : VectorXd::Constant(m, input_weight);
}

MpcConfig MpcConfig::from_json(const nlohmann::json& j) {
    MpcConfig c;
    c.horizon = j.value("horizon", c.horizon);
    c.position_weight = j.value("position_weight", c.position_weight);
    c.velocity_weight = j.value("velocity_weight", c.velocity_weight);
    c.input_weight = j.value("input_weight", c.input_weight);
    c.state_weight = vector_or_empty(j, "state_weight");
    c.input_weights = vector_or_empty(j, "input_weights");
    c.x_min = vector_or_empty(j, "x_min", -kInf);
    c.x_max = vector_or_empty(j, "x_max", kInf);
    c.u_min = vector_or_empty(j, "u_min", -kInf);
    c.u_max = vector_or_empty(j, "u_max", kInf);
    c.tolerance = j.value("tolerance", c.tolerance);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.geso = j.value("geso", c.geso);
    c.k1 = j.value("k1", c.k1);
    c.k2 = j.value("k2", c.k2);
    return c;
}

nlohmann::json MpcConfig::to_json() const {
    return {{"horizon", horizon},
            {"position_weight", position_weight},
            {"velocity_weight", velocity_weight},
            {"input_weight", input_weight},
            {"state_weight", vector_json(state_weight)},
            {"input_weights", vector_json(input_weights)},
            {"x_min", vector_json(x_min)},
            {"x_max", vector_json(x_max)},
            {"u_min", vector_json(u_min)},
            {"u_max", vector_json(u_max)},
            {"tolerance", tolerance},
            {"max_iterations", max_iterations},
            {"geso", geso},
            {"k1", k1},
            {"k2", k2}};
}

Prediction precompute(const koopman::KoopmanModel& model, int horizon) {
    if (model.variant() == koopman::Variant::nbk) {
        throw std::invalid_argument("mpc: bilinear models are not supported by linear MPC");
    }
    const int sd = model.state_dim();
    const int m = model.inputs();
    const int l = model.lifted_dim();
    Prediction p;
    p.phi.resize(sd * horizon, l);
    p.gamma = MatrixXd::Zero(sd * horizon, m * horizon);
    p.psi.resize(sd * horizon, sd);
    // powers[k] = C^x A^k
    std::vector<MatrixXd> powers;
    powers.reserve(static_cast<std::size_t>(horizon + 1));
    MatrixXd cak = MatrixXd::Identity(l, l).topRows(sd);
    for (int k = 0; k <= horizon; ++k) {
        powers.push_back(cak);
        cak = cak * model.A();
    }
    std::vector<MatrixXd> cab;  // C^x A^k B
    std::vector<MatrixXd> cac;  // C^x A^k C^x'
    for (int k = 0; k < horizon; ++k) {
        cab.push_back(powers[static_cast<std::size_t>(k)] * model.B());
        cac.push_back(powers[static_cast<std::size_t>(k)].leftCols(sd));
    }
    MatrixXd psi_acc = MatrixXd::Zero(sd, sd);
    for (int k = 1; k <= horizon; ++k) {
        p.phi.middleRows(sd * (k - 1), sd) = powers[static_cast<std::size_t>(k)];
        for (int j = 0; j < k; ++j) {
            p.gamma.block(sd * (k - 1), m * j, sd, m) = cab[static_cast<std::size_t>(k - 1 - j)];
        }
        psi_acc += cac[static_cast<std::size_t>(k - 1)];
        p.psi.middleRows(sd * (k - 1), sd) = psi_acc;
    }
    return p;
}

qp::QpProblem build_qp(const Prediction& pred, const VectorXd& z0, const std::vector<VectorXd>& refs,
                       const VectorXd& d_hat, double dt, int m, const MpcConfig& cfg) {
    const auto sd = pred.psi.cols();
    const int s = cfg.horizon;
    if (pred.phi.rows() != sd * s) throw std::invalid_argument("build_qp: prediction horizon mismatch");
    const int n = static_cast<int>(sd / 2);
    cfg.validate(n, m);
    if (static_cast<int>(refs.size()) < s) throw std::invalid_argument("build_qp: reference window shorter than horizon");
    if (z0.size() != pred.phi.cols() || d_hat.size() != sd) throw std::invalid_argument("build_qp: dimension mismatch");
    VectorXd ref(sd * s);
    for (int k = 0; k < s; ++k) {
        if (refs[static_cast<std::size_t>(k)].size() != sd) throw std::invalid_argument("build_qp: reference size");
        ref.segment(sd * k, sd) = refs[static_cast<std::size_t>(k)];
    }
    const VectorXd qw = cfg.state_weights(n).replicate(s, 1);
    const VectorXd rw = cfg.input_weight_vector(m).replicate(s, 1);
    const VectorXd free = pred.phi * z0 + pred.psi * (d_hat * dt);

    qp::QpProblem qp;
    const MatrixXd wg = qw.asDiagonal() * pred.gamma;
    qp.H = 2.0 * (pred.gamma.transpose() * wg);
    qp.H.diagonal() += 2.0 * rw;
    qp.H = 0.5 * (qp.H + qp.H.transpose());
    qp.f = 2.0 * (wg.transpose() * (free - ref));
    qp.lb = bound_or(cfg.u_min, m, -kInf).replicate(s, 1);
    qp.ub = bound_or(cfg.u_max, m, kInf).replicate(s, 1);

    // State bounds become affine rows in U for every finite entry.
    const VectorXd xlo = bound_or(cfg.x_min, sd, -kInf).replicate(s, 1);
    const VectorXd xhi = bound_or(cfg.x_max, sd, kInf).replicate(s, 1);
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < xlo.size(); ++i) {
        if (!std::isinf(xlo[i]) || !std::isinf(xhi[i])) rows.push_back(i);
    }
    qp.G.resize(static_cast<Eigen::Index>(rows.size()), m * s);
    qp.g_lo.resize(qp.G.rows());
    qp.g_hi.resize(qp.G.rows());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = rows[r];
        const auto ri = static_cast<Eigen::Index>(r);
        qp.G.row(ri) = pred.gamma.row(i);
        qp.g_lo[ri] = xlo[i] - free[i];
        qp.g_hi[ri] = xhi[i] - free[i];
    }
    return qp;
}

qp::QpProblem build_qp(const koopman::KoopmanModel& model, const VectorXd& z0, const std::vector<VectorXd>& refs,
                       const VectorXd& d_hat, const MpcConfig& cfg) {
    return build_qp(precompute(model, cfg.horizon), z0, refs, d_hat, model.dt(), model.inputs(), cfg);
}

KoopmanMpc::KoopmanMpc(const koopman::KoopmanModel& model, MpcConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate(model.dof(), model.inputs());
    pred_ = precompute(model, cfg_.horizon);
}

void KoopmanMpc::reset() {
    solver_.reset();
    observer_.reset();
    last_x_ = last_z_ = last_u_ = warm_x_ = warm_y_ = VectorXd();
    faults_ = 0;
}

StepResult KoopmanMpc::step(const VectorXd& x_meas, const std::vector<VectorXd>& refs) {
    const int m = model_.inputs();
    const int s = cfg_.horizon;
    if (x_meas.size() != model_.state_dim() || !x_meas.allFinite()) {
        throw std::invalid_argument("mpc step: bad measurement");
    }
    const VectorXd z = model_.lift(x_meas);

    // Observer: advance the estimate over the previous control period.
    if (cfg_.geso) {
        if (!observer_) {
            observer_ = geso::GesoState::initial(x_meas, cfg_.k1, cfg_.k2);
        } else {
            observer_ = geso::geso_update(*observer_, last_x_, last_z_, last_u_, model_, model_.dt());
        }
    }
    const VectorXd d_hat = observer_ ? observer_->d_hat : VectorXd::Zero(model_.state_dim());

    qp::QpProblem problem = build_qp(pred_, z, refs, d_hat, model_.dt(), m, cfg_);
    qp::QpSettings settings;
    settings.eps_abs = cfg_.tolerance;
    settings.eps_rel = cfg_.tolerance;
    settings.max_iter = cfg_.max_iterations;
    if (!solver_ || problem.G.rows() > 0) {
        solver_.emplace(std::move(problem), settings);
    } else {
        solver_->update_linear_cost(problem.f);
    }
    const auto res = solver_->solve(warm_x_, warm_y_);

    StepResult out;
    out.status = res.status;
    out.iterations = res.iterations;
    out.kkt_residual = res.residuals.max();
    out.d_hat = d_hat;
    const bool ok = res.status != qp::QpStatus::infeasible && res.x.allFinite();
    if (ok) {
        out.u = res.x.head(m);
        // Shift the plan by one step for the next warm start.
        warm_x_.resize(m * s);
        warm_x_.head(m * (s - 1)) = res.x.tail(m * (s - 1));
        warm_x_.tail(m) = res.x.tail(m);
        warm_y_ = res.y;
        warm_y_.head(m * (s - 1)) = res.y.segment(m, m * (s - 1));
    } else {
        out.fallback = true;
        ++faults_;
        out.u = last_u_.size() == m ? last_u_ : VectorXd::Zero(m);
        std::cerr << "mpc: solver returned " << qp::to_string(res.status) << ", reusing previous input\n";
        warm_x_ = VectorXd();
        warm_y_ = VectorXd();
    }
    last_x_ = x_meas;
    last_z_ = z;
    last_u_ = out.u;
    return out;
}

}  // namespace mkoop::mpc
