#pragma once

// Rigid-body dynamics of serial revolute chains.
//
//   M(q) q'' + C(q, q') q' + G(q) + b q' = tau + tau_d
//
// Every link is a body whose principal axis runs along its local x axis, from
// its joint to the next joint at distance `length`. Joint i rotates link i
// about `axis` (expressed in the frame of link i-1 at the joint). All
// quantities are SI: kg, m, rad, N*m.

#include <Eigen/Dense>

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mkoop::dynamics {

using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

/// Raised for malformed models, bad dimensions or non-finite input.
class ModelError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised by the integrator when the state leaves the sane range.
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class Topology {
    planar,   // every axis along z; gravity in the x-y plane
    spatial,  // first axis z (yaw), the rest y (pitch)
    custom,   // per-link axes given explicitly
};

struct Link {
    double mass = 1.0;
    double length = 1.0;
    Vector3d inertia_diag = Vector3d::Zero();  // about the centre of mass, link frame
    double com_fraction = 0.5;                  // centre of mass at com_fraction * length along x
    Vector3d axis = Vector3d::UnitZ();          // joint axis
};

class ManipulatorModel {
  public:
    ManipulatorModel(std::vector<Link> links, Vector3d gravity, VectorXd friction,
                     Topology topology);

    /// n-link chain with identical links; thin-rod inertia diag[0, ml^2/12, ml^2/12].
    static ManipulatorModel uniform_chain(int n, double mass, double length, Topology topology);

    static ManipulatorModel from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    int dof() const { return static_cast<int>(links_.size()); }
    const std::vector<Link>& links() const { return links_; }
    const Vector3d& gravity() const { return gravity_; }
    const VectorXd& friction() const { return friction_; }
    Topology topology() const { return topology_; }
    double reach() const;

  private:
    std::vector<Link> links_;
    Vector3d gravity_;
    VectorXd friction_;
    Topology topology_;
};

std::string to_string(Topology t);
Topology topology_from_string(const std::string& s);

/// World-frame kinematic quantities of each link at a configuration.
struct LinkFrames {
    std::vector<Matrix3d> rotation;  // link frame -> world
    std::vector<Vector3d> joint_origin;
    std::vector<Vector3d> joint_axis;  // world frame
    std::vector<Vector3d> com;
    Vector3d tip = Vector3d::Zero();
};

LinkFrames link_frames(const ManipulatorModel& model, const VectorXd& q);

struct DynamicsTerms {
    MatrixXd mass;        // M(q)
    VectorXd coriolis;    // C(q, q') q'
    VectorXd gravity;     // G(q)
};

/// M by the composite rigid-body algorithm, Cq' and G by recursive Newton-Euler.
DynamicsTerms dynamics_terms(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd);

MatrixXd mass_matrix(const ManipulatorModel& model, const VectorXd& q);
VectorXd gravity_torque(const ManipulatorModel& model, const VectorXd& q);

/// Joint torques required for (q, q', q''), with gravity and friction.
VectorXd inverse_dynamics(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd,
                          const VectorXd& qdd);

double kinetic_energy(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd);
double potential_energy(const ManipulatorModel& model, const VectorXd& q);

Vector3d ee_position(const ManipulatorModel& model, const VectorXd& q);
/// 3 x n translational Jacobian of the chain tip.
MatrixXd ee_jacobian(const ManipulatorModel& model, const VectorXd& q);

enum class DisturbanceKind { none, actuator_fault, constant_torque, ee_load };

struct DisturbanceSpec {
    DisturbanceKind kind = DisturbanceKind::none;
    double gain = 0.0;        // actuator_fault: tau_d = gain * u
    VectorXd torque;          // constant_torque (n)
    Vector3d force = Vector3d::Zero();  // ee_load, world frame
    double t_on = 0.0;
    double t_off = std::numeric_limits<double>::infinity();

    static DisturbanceSpec none_spec() { return {}; }
    static DisturbanceSpec actuator_fault(double gain);
    static DisturbanceSpec constant_torque(VectorXd torque);
    static DisturbanceSpec ee_load(const Vector3d& force);

    bool active(double t) const { return kind != DisturbanceKind::none && t >= t_on && t <= t_off; }

    static DisturbanceSpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

std::string to_string(DisturbanceKind k);

/// tau_d at time t for commanded input u.
VectorXd disturbance_torque(const ManipulatorModel& model, const DisturbanceSpec& dist,
                            const VectorXd& q, const VectorXd& u, double t);

VectorXd forward_dynamics(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd,
                          const VectorXd& tau, const DisturbanceSpec& dist, double t);

/// Implicit state x = [q; p] with p = M(q) q'.
struct MomentumState {
    VectorXd q;
    VectorXd p;

    int dof() const { return static_cast<int>(q.size()); }
    VectorXd stacked() const;
    static MomentumState from_stacked(const VectorXd& x);
};

MomentumState momentum_state(const ManipulatorModel& model, const VectorXd& q, const VectorXd& qd);
VectorXd velocity_from_momentum(const ManipulatorModel& model, const MomentumState& state);

/// Explicit-coordinate simulation state.
struct JointState {
    VectorXd q;
    VectorXd qd;
};

/// One classical RK4 step of length dt with tau held constant; t is the step start time.
JointState step_joint(const ManipulatorModel& model, const JointState& s, const VectorXd& tau,
                      const DisturbanceSpec& dist, double t, double dt);

MomentumState step(const ManipulatorModel& model, const MomentumState& state, const VectorXd& tau,
                   const DisturbanceSpec& dist, double t, double dt);

}  // namespace mkoop::dynamics
