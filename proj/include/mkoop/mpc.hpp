#pragma once

// Linear MPC over a lifted model with in-loop disturbance compensation.
//
// Prediction model over the horizon (d frozen at its current estimate):
//   z_{k+1} = A z_k + B u_k + C^x' d dt
// Cost: sum_{k=1..s} (C^x z_k - r_k)' Q (C^x z_k - r_k) + sum_{k=0..s-1} u_k' R u_k.
// Condensing eliminates z, leaving U = [u_0; ...; u_{s-1}] as the decision.

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mkoop/geso.hpp"
#include "mkoop/koopman.hpp"
#include "mkoop/qp.hpp"

namespace mkoop::mpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct MpcConfig {
    int horizon = 20;
    double position_weight = 100.0;
    // On the second state block. Momentum is about 0.03 x velocity on the default
    // chain, so 300 on p^2 is comparable to 0.3 on velocity^2.
    double velocity_weight = 300.0;
    double input_weight = 0.01;
    VectorXd state_weight;  // optional 2n diagonal, overrides the scalar weights
    VectorXd input_weights;  // optional m diagonal
    VectorXd x_min, x_max;   // empty = unbounded
    VectorXd u_min, u_max;   // empty = unbounded
    double tolerance = 1e-6;
    int max_iterations = 4000;
    bool geso = true;
    double k1 = 40.0;
    double k2 = 800.0;

    void validate(int n, int m) const;
    VectorXd state_weights(int n) const;
    VectorXd input_weight_vector(int m) const;
    static MpcConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Stacked prediction X = Phi z0 + Gamma U + Psi (d dt), X = [x_1; ...; x_s].
struct Prediction {
    MatrixXd phi;    // 2n s x L
    MatrixXd gamma;  // 2n s x m s
    MatrixXd psi;    // 2n s x 2n
};

Prediction precompute(const koopman::KoopmanModel& model, int horizon);

/// Condensed QP for one control step. refs[j] is the reference for x_{j+1}.
qp::QpProblem build_qp(const koopman::KoopmanModel& model, const VectorXd& z0, const std::vector<VectorXd>& refs,
                       const VectorXd& d_hat, const MpcConfig& cfg);
qp::QpProblem build_qp(const Prediction& pred, const VectorXd& z0, const std::vector<VectorXd>& refs,
                       const VectorXd& d_hat, double dt, int m, const MpcConfig& cfg);

struct StepResult {
    VectorXd u;
    qp::QpStatus status = qp::QpStatus::solved;
    int iterations = 0;
    double kkt_residual = 0.0;
    bool fallback = false;  // previous input reused after a solver failure
    VectorXd d_hat;
};

class KoopmanMpc {
  public:
    KoopmanMpc(const koopman::KoopmanModel& model, MpcConfig cfg);

    /// x_meas in the model's state convention; refs needs at least `horizon` entries.
    StepResult step(const VectorXd& x_meas, const std::vector<VectorXd>& refs);

    const MpcConfig& config() const { return cfg_; }
    const std::optional<geso::GesoState>& observer() const { return observer_; }
    int faults() const { return faults_; }
    void reset();

  private:
    const koopman::KoopmanModel& model_;
    MpcConfig cfg_;
    Prediction pred_;
    std::optional<qp::QpSolver> solver_;
    std::optional<geso::GesoState> observer_;
    // Previous step data for the observer and the warm start.
    VectorXd last_x_, last_z_, last_u_;
    VectorXd warm_x_, warm_y_;
    int faults_ = 0;
};

}  // namespace mkoop::mpc
