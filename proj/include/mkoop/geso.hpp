#pragma once

// Linear generalized extended state observer.
//
//   xh' = f_model + k1 (x - xh) + dh
//   dh' = k2 (x - xh)
//
// discretized with forward Euler at the control period. The estimation error
// of each channel then obeys e'' + k1 e' + k2 e = 0 for a constant disturbance.

#include <Eigen/Dense>

#include "mkoop/koopman.hpp"

namespace mkoop::geso {

using Eigen::VectorXd;

struct GesoState {
    VectorXd x_hat;  // state estimate
    VectorXd d_hat;  // lumped disturbance estimate
    double k1 = 40.0;
    double k2 = 800.0;

    /// x_hat = first measurement, d_hat = 0.
    static GesoState initial(const VectorXd& x_meas, double k1, double k2);
};

/// One observer step given the model-predicted state rate.
GesoState geso_update(const GesoState& obs, const VectorXd& x_meas, const VectorXd& model_flow, double dt);

/// Model rate from the discrete lifted model: C^x (A z + B u - z) / dt.
VectorXd model_flow(const koopman::KoopmanModel& model, const VectorXd& z, const VectorXd& u);

GesoState geso_update(const GesoState& obs, const VectorXd& x_meas, const VectorXd& z, const VectorXd& u,
                      const koopman::KoopmanModel& model, double dt);

}  // namespace mkoop::geso
