#include "mkoop/dynamics.hpp"

#include <cmath>

namespace mkoop::dynamics {
namespace {

void require_size(const VectorXd& v, int n, const char* what) {
    if (v.size() != n) {
        throw ModelError(std::string(what) + ": expected dimension " + std::to_string(n) +
                         ", got " + std::to_string(v.size()));
    }
}

void require_finite(const VectorXd& v, const char* what) {
    if (!v.allFinite()) throw ModelError(std::string(what) + ": non-finite entry");
}

// Inertia shift to a point at offset r from the centre of mass.
Matrix3d parallel_axis(double mass, const Vector3d& r) {
    return mass * (r.squaredNorm() * Matrix3d::Identity() - r * r.transpose());
}

Vector3d vec3_from_json(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 3) {
        throw ModelError(std::string(what) + " must be an array of 3 numbers");
    }
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

// Recursive Newton-Euler in world coordinates. gravity is the field the chain
// sits in; passing zero yields the pure inertial torques.
VectorXd rnea(const ManipulatorModel& model, const LinkFrames& f, const VectorXd& qd,
              const VectorXd& qdd, const Vector3d& gravity) {
    const int n = model.dof();
    const auto& links = model.links();
    std::vector<Vector3d> force(n), moment(n);

    Vector3d omega = Vector3d::Zero();
    Vector3d alpha = Vector3d::Zero();
    Vector3d acc_origin = -gravity;
    Vector3d prev_origin = f.joint_origin[0];
    Vector3d prev_omega = Vector3d::Zero();
    Vector3d prev_alpha = Vector3d::Zero();
    for (int i = 0; i < n; ++i) {
        const Vector3d r = f.joint_origin[i] - prev_origin;
        acc_origin += prev_alpha.cross(r) + prev_omega.cross(prev_omega.cross(r));
        const Vector3d& a = f.joint_axis[i];
        omega = prev_omega + a * qd[i];
        alpha = prev_alpha + a * qdd[i] + prev_omega.cross(a * qd[i]);

        const Vector3d rc = f.com[i] - f.joint_origin[i];
        const Vector3d acc_com = acc_origin + alpha.cross(rc) + omega.cross(omega.cross(rc));
        const Matrix3d inertia =
            f.rotation[i] * links[i].inertia_diag.asDiagonal() * f.rotation[i].transpose();
        force[i] = links[i].mass * acc_com;
        moment[i] = inertia * alpha + omega.cross(inertia * omega);

        prev_origin = f.joint_origin[i];
        prev_omega = omega;
        prev_alpha = alpha;
    }

    VectorXd tau(n);
    Vector3d f_child = Vector3d::Zero();
    Vector3d n_child = Vector3d::Zero();
    for (int i = n - 1; i >= 0; --i) {
        const Vector3d rc = f.com[i] - f.joint_origin[i];
        const Vector3d child_origin = (i + 1 < n) ? f.joint_origin[i + 1] : f.tip;
        const Vector3d rchild = child_origin - f.joint_origin[i];
        const Vector3d fi = force[i] + f_child;
        const Vector3d ni = moment[i] + rc.cross(force[i]) + n_child + rchild.cross(f_child);
        tau[i] = f.joint_axis[i].dot(ni);
        f_child = fi;
        n_child = ni;
    }
    return tau;
}

// Composite rigid-body algorithm. A unit acceleration of joint j moves the
// subtree j..n-1 as one rigid body about a_j through o_j; M(i, j) is the
// torque that takes at joint i <= j.
MatrixXd crba(const ManipulatorModel& model, const LinkFrames& f) {
    const int n = model.dof();
    const auto& links = model.links();
    MatrixXd m = MatrixXd::Zero(n, n);

    double comp_mass = 0.0;
    Vector3d comp_com = Vector3d::Zero();
    Matrix3d comp_inertia = Matrix3d::Zero();
    for (int j = n - 1; j >= 0; --j) {
        const double mj = links[j].mass;
        const Matrix3d ij =
            f.rotation[j] * links[j].inertia_diag.asDiagonal() * f.rotation[j].transpose();
        const double new_mass = comp_mass + mj;
        const Vector3d new_com = (comp_mass * comp_com + mj * f.com[j]) / new_mass;
        comp_inertia = ij + parallel_axis(mj, f.com[j] - new_com) + comp_inertia +
                       parallel_axis(comp_mass, comp_com - new_com);
        comp_mass = new_mass;
        comp_com = new_com;

        const Vector3d& aj = f.joint_axis[j];
        const Vector3d lin = comp_mass * aj.cross(comp_com - f.joint_origin[j]);
        const Vector3d ang = comp_inertia * aj;
        for (int i = 0; i <= j; ++i) {
            const Vector3d about_i = ang + (comp_com - f.joint_origin[i]).cross(lin);
            m(i, j) = f.joint_axis[i].dot(about_i);
            m(j, i) = m(i, j);
        }
    }
    return m;
}

Eigen::LLT<MatrixXd> factor_mass(const MatrixXd& m) {
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) {
        throw ModelError("mass matrix is not positive definite; check the model definition");
    }
    return llt;
}

}  // namespace

ManipulatorModel::ManipulatorModel(std::vector<Link> links, Vector3d gravity, VectorXd friction,
                                   Topology topology)
    : links_(std::move(links)), gravity_(gravity), friction_(std::move(friction)), topology_(topology) {
    if (links_.empty()) throw ModelError("model needs at least one link");
    const int n = dof();
    for (int i = 0; i < n; ++i) {
        auto& l = links_[i];
        if (!(l.mass > 0.0) || !(l.length > 0.0)) {
            throw ModelError("link " + std::to_string(i) + ": mass and length must be positive");
        }
        if ((l.inertia_diag.array() < 0.0).any()) {
            throw ModelError("link " + std::to_string(i) + ": inertia must be non-negative");
        }
        switch (topology_) {
            case Topology::planar: l.axis = Vector3d::UnitZ(); break;
            case Topology::spatial: l.axis = (i == 0) ? Vector3d::UnitZ() : Vector3d::UnitY(); break;
            case Topology::custom:
                if (l.axis.norm() < 1e-12) {
                    throw ModelError("link " + std::to_string(i) + ": zero joint axis");
                }
                l.axis.normalize();
                break;
        }
    }
    if (friction_.size() == 0) friction_ = VectorXd::Zero(n);
    require_size(friction_, n, "friction");
    if (!gravity_.allFinite()) throw ModelError("gravity must be finite");
}

ManipulatorModel ManipulatorModel::uniform_chain(int n, double mass, double length,
                                                 Topology topology) {
    if (n < 1) throw ModelError("model needs at least one link");
    std::vector<Link> links(n);
    const double rod = mass * length * length / 12.0;
    for (auto& l : links) {
        l.mass = mass;
        l.length = length;
        l.inertia_diag = Vector3d(0.0, rod, rod);
    }
    const Vector3d g = topology == Topology::planar ? Vector3d(0, -9.81, 0) : Vector3d(0, 0, -9.81);
    return ManipulatorModel(std::move(links), g, VectorXd::Zero(n), topology);
}

double ManipulatorModel::reach() const {
    double r = 0.0;
    for (const auto& l : links_) r += l.length;
    return r;
}

std::string to_string(Topology t) {
    switch (t) {
        case Topology::planar: return "planar";
        case Topology::spatial: return "spatial";
        case Topology::custom: return "custom";
    }
    return "custom";
}

Topology topology_from_string(const std::string& s) {
    if (s == "planar") return Topology::planar;
    if (s == "spatial") return Topology::spatial;
    if (s == "custom") return Topology::custom;
    throw ModelError("topology: unknown value '" + s + "'");
}

ManipulatorModel ManipulatorModel::from_json(const nlohmann::json& j) {
    if (!j.contains("links") || !j["links"].is_array()) throw ModelError("links: missing array");
    const auto& jl = j["links"];
    const int n = j.value("n", static_cast<int>(jl.size()));
    if (n != static_cast<int>(jl.size())) throw ModelError("n: does not match links length");
    const Topology topo = topology_from_string(j.value("topology", std::string("spatial")));
    std::vector<Link> links;
    for (const auto& e : jl) {
        Link l;
        l.mass = e.at("mass").get<double>();
        l.length = e.at("length").get<double>();
        if (e.contains("inertia_diag")) {
            l.inertia_diag = vec3_from_json(e["inertia_diag"], "inertia_diag");
        } else {
            const double rod = l.mass * l.length * l.length / 12.0;
            l.inertia_diag = Vector3d(0.0, rod, rod);
        }
        l.com_fraction = e.value("com", 0.5);
        if (e.contains("axis")) l.axis = vec3_from_json(e["axis"], "axis");
        links.push_back(l);
    }
    Vector3d g = topo == Topology::planar ? Vector3d(0, -9.81, 0) : Vector3d(0, 0, -9.81);
    if (j.contains("gravity")) g = vec3_from_json(j["gravity"], "gravity");
    VectorXd fr = VectorXd::Zero(n);
    if (j.contains("friction")) {
        const auto& jf = j["friction"];
        if (jf.is_number()) {
            fr.setConstant(jf.get<double>());
        } else {
            const auto v = jf.get<std::vector<double>>();
            fr = Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
        }
    }
    return ManipulatorModel(std::move(links), g, fr, topo);
}

nlohmann::json ManipulatorModel::to_json() const {
    nlohmann::json jl = nlohmann::json::array();
    for (const auto& l : links_) {
        jl.push_back({{"mass", l.mass},
                      {"length", l.length},
                      {"inertia_diag", {l.inertia_diag.x(), l.inertia_diag.y(), l.inertia_diag.z()}},
                      {"com", l.com_fraction},
                      {"axis", {l.axis.x(), l.axis.y(), l.axis.z()}}});
    }
    return {{"n", dof()},
            {"links", jl},
            {"gravity", {gravity_.x(), gravity_.y(), gravity_.z()}},
            {"friction", std::vector<double>(friction_.data(), friction_.data() + friction_.size())},
            {"topology", to_string(topology_)}};
}

LinkFrames link_frames(const ManipulatorModel& model, const VectorXd& q) {
    const int n = model.dof();
    require_size(q, n, "q");
    require_finite(q, "q");
    LinkFrames f;
    f.rotation.resize(n);
    f.joint_origin.resize(n);
    f.joint_axis.resize(n);
    f.com.resize(n);
    Matrix3d r = Matrix3d::Identity();
    Vector3d origin = Vector3d::Zero();
    for (int i = 0; i < n; ++i) {
        const auto& l = model.links()[i];
        f.joint_axis[i] = r * l.axis;
        r = r * Eigen::AngleAxisd(q[i], l.axis).toRotationMatrix();
        f.rotation[i] = r;
        f.joint_origin[i] = origin;
        f.com[i] = origin + r * Vector3d(l.com_fraction * l.length, 0, 0);
        origin += r * Vector3d(l.length, 0, 0);
    }
    f.tip = origin;
    return f;
}

DynamicsTerms dynamics_terms(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd) {
    const int n = model.dof();
    require_size(qd, n, "qd");
    require_finite(qd, "qd");
    const LinkFrames f = link_frames(model, q);
    DynamicsTerms t;
    t.mass = crba(model, f);
    factor_mass(t.mass);
    const VectorXd zero = VectorXd::Zero(n);
    t.gravity = rnea(model, f, zero, zero, model.gravity());
    t.coriolis = rnea(model, f, qd, zero, Vector3d::Zero());
    return t;
}

MatrixXd mass_matrix(const ManipulatorModel& model, const VectorXd& q) {
    return crba(model, link_frames(model, q));
}

VectorXd gravity_torque(const ManipulatorModel& model, const VectorXd& q) {
    const VectorXd zero = VectorXd::Zero(model.dof());
    return rnea(model, link_frames(model, q), zero, zero, model.gravity());
}

VectorXd inverse_dynamics(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd,
                          const VectorXd& qdd) {
    require_size(qd, model.dof(), "qd");
    require_size(qdd, model.dof(), "qdd");
    return rnea(model, link_frames(model, q), qd, qdd, model.gravity()) +
           model.friction().cwiseProduct(qd);
}

double kinetic_energy(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd) {
    return 0.5 * qd.dot(mass_matrix(model, q) * qd);
}

double potential_energy(const ManipulatorModel& model, const VectorXd& q) {
    const LinkFrames f = link_frames(model, q);
    double v = 0.0;
    for (int i = 0; i < model.dof(); ++i) v -= model.links()[i].mass * model.gravity().dot(f.com[i]);
    return v;
}

Vector3d ee_position(const ManipulatorModel& model, const VectorXd& q) {
    return link_frames(model, q).tip;
}

MatrixXd ee_jacobian(const ManipulatorModel& model, const VectorXd& q) {
    const LinkFrames f = link_frames(model, q);
    MatrixXd j(3, model.dof());
    for (int i = 0; i < model.dof(); ++i) j.col(i) = f.joint_axis[i].cross(f.tip - f.joint_origin[i]);
    return j;
}

DisturbanceSpec DisturbanceSpec::actuator_fault(double gain) {
    DisturbanceSpec d;
    d.kind = DisturbanceKind::actuator_fault;
    d.gain = gain;
    return d;
}

DisturbanceSpec DisturbanceSpec::constant_torque(VectorXd torque) {
    DisturbanceSpec d;
    d.kind = DisturbanceKind::constant_torque;
    d.torque = std::move(torque);
    return d;
}

DisturbanceSpec DisturbanceSpec::ee_load(const Vector3d& force) {
    DisturbanceSpec d;
    d.kind = DisturbanceKind::ee_load;
    d.force = force;
    return d;
}

std::string to_string(DisturbanceKind k) {
    switch (k) {
        case DisturbanceKind::none: return "none";
        case DisturbanceKind::actuator_fault: return "actuator_fault";
        case DisturbanceKind::constant_torque: return "constant_torque";
        case DisturbanceKind::ee_load: return "ee_load";
    }
    return "none";
}

DisturbanceSpec DisturbanceSpec::from_json(const nlohmann::json& j) {
    DisturbanceSpec d;
    const std::string kind = j.value("kind", std::string("none"));
    if (kind == "none") {
        d.kind = DisturbanceKind::none;
    } else if (kind == "actuator_fault") {
        d.kind = DisturbanceKind::actuator_fault;
        d.gain = j.at("gain").get<double>();
    } else if (kind == "constant_torque") {
        d.kind = DisturbanceKind::constant_torque;
        const auto v = j.at("torque").get<std::vector<double>>();
        d.torque = Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    } else if (kind == "ee_load") {
        d.kind = DisturbanceKind::ee_load;
        d.force = vec3_from_json(j.at("force"), "force");
    } else {
        throw ModelError("disturbance.kind: unknown value '" + kind + "'");
    }
    d.t_on = j.value("t_on", 0.0);
    if (j.contains("t_off") && !j["t_off"].is_null()) d.t_off = j["t_off"].get<double>();
    return d;
}

nlohmann::json DisturbanceSpec::to_json() const {
    nlohmann::json j{{"kind", to_string(kind)}, {"t_on", t_on}};
    if (std::isfinite(t_off)) j["t_off"] = t_off;
    switch (kind) {
        case DisturbanceKind::actuator_fault: j["gain"] = gain; break;
        case DisturbanceKind::constant_torque:
            j["torque"] = std::vector<double>(torque.data(), torque.data() + torque.size());
            break;
        case DisturbanceKind::ee_load: j["force"] = {force.x(), force.y(), force.z()}; break;
        case DisturbanceKind::none: break;
    }
    return j;
}

VectorXd disturbance_torque(const ManipulatorModel& model, const DisturbanceSpec& dist,
                            const VectorXd& q, const VectorXd& u, double t) {
    const int n = model.dof();
    if (!dist.active(t)) return VectorXd::Zero(n);
    switch (dist.kind) {
        case DisturbanceKind::actuator_fault: return dist.gain * u;
        case DisturbanceKind::constant_torque:
            require_size(dist.torque, n, "disturbance torque");
            return dist.torque;
        case DisturbanceKind::ee_load: return ee_jacobian(model, q).transpose() * dist.force;
        case DisturbanceKind::none: break;
    }
    return VectorXd::Zero(n);
}

VectorXd forward_dynamics(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd,
                          const VectorXd& tau, const DisturbanceSpec& dist, double t) {
    const int n = model.dof();
    require_size(qd, n, "qd");
    require_size(tau, n, "tau");
    require_finite(qd, "qd");
    require_finite(tau, "tau");
    const LinkFrames f = link_frames(model, q);
    const MatrixXd m = crba(model, f);
    const VectorXd bias = rnea(model, f, qd, VectorXd::Zero(n), model.gravity()) +
                          model.friction().cwiseProduct(qd);
    const VectorXd rhs = tau + disturbance_torque(model, dist, q, tau, t) - bias;
    return factor_mass(m).solve(rhs);
}

VectorXd MomentumState::stacked() const {
    VectorXd x(q.size() + p.size());
    x << q, p;
    return x;
}

MomentumState MomentumState::from_stacked(const VectorXd& x) {
    if (x.size() % 2 != 0) throw ModelError("stacked state must have even length");
    const Eigen::Index n = x.size() / 2;
    return {x.head(n), x.tail(n)};
}

MomentumState momentum_state(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd) {
    require_size(qd, model.dof(), "qd");
    return {q, mass_matrix(model, q) * qd};
}

VectorXd velocity_from_momentum(const ManipulatorModel& model, const MomentumState& state) {
    require_size(state.p, model.dof(), "p");
    return factor_mass(mass_matrix(model, state.q)).solve(state.p);
}

JointState step_joint(const ManipulatorModel& model, const JointState& s, const VectorXd& tau,
                      const DisturbanceSpec& dist, double t, double dt) {
    if (!(dt > 0.0)) throw ModelError("dt must be positive");
    auto accel = [&](const VectorXd& q, const VectorXd& qd, double tt) {
        return forward_dynamics(model, q, qd, tau, dist, tt);
    };
    const double h = 0.5 * dt;
    const VectorXd k1q = s.qd;
    const VectorXd k1v = accel(s.q, s.qd, t);
    const VectorXd k2q = s.qd + h * k1v;
    const VectorXd k2v = accel(s.q + h * k1q, k2q, t + h);
    const VectorXd k3q = s.qd + h * k2v;
    const VectorXd k3v = accel(s.q + h * k2q, k3q, t + h);
    const VectorXd k4q = s.qd + dt * k3v;
    const VectorXd k4v = accel(s.q + dt * k3q, k4q, t + dt);

    JointState out;
    out.q = s.q + (dt / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
    out.qd = s.qd + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    constexpr double limit = 1e6;
    if (!out.q.allFinite() || !out.qd.allFinite() || out.q.cwiseAbs().maxCoeff() > limit ||
        out.qd.cwiseAbs().maxCoeff() > limit) {
        throw DivergenceError("simulation diverged at t = " + std::to_string(t));
    }
    return out;
}

MomentumState step(const ManipulatorModel& model, const MomentumState& state, const VectorXd& tau,
                   const DisturbanceSpec& dist, double t, double dt) {
    const JointState js{state.q, velocity_from_momentum(model, state)};
    const JointState next = step_joint(model, js, tau, dist, t, dt);
    return momentum_state(model, next.q, next.qd);
}

}  // namespace mkoop::dynamics
