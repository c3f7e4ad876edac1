#include "mkoop/geso.hpp"

#include <stdexcept>

namespace mkoop::geso {

GesoState GesoState::initial(const VectorXd& x_meas, double k1, double k2) {
    if (!(k1 > 0.0) || !(k2 > 0.0)) throw std::invalid_argument("geso: gains k1 and k2 must be positive");
    if (!x_meas.allFinite()) throw std::invalid_argument("geso: non-finite initial measurement");
    return {x_meas, VectorXd::Zero(x_meas.size()), k1, k2};
}

GesoState geso_update(const GesoState& obs, const VectorXd& x_meas, const VectorXd& flow, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("geso: dt must be positive");
    if (x_meas.size() != obs.x_hat.size() || flow.size() != obs.x_hat.size()) {
        throw std::invalid_argument("geso: dimension mismatch");
    }
    if (!x_meas.allFinite() || !flow.allFinite()) throw std::invalid_argument("geso: non-finite input");
    const VectorXd innovation = x_meas - obs.x_hat;
    GesoState next = obs;
    next.x_hat = obs.x_hat + dt * (flow + obs.k1 * innovation + obs.d_hat);
    next.d_hat = obs.d_hat + dt * obs.k2 * innovation;
    return next;
}

VectorXd model_flow(const koopman::KoopmanModel& model, const VectorXd& z, const VectorXd& u) {
    return model.recover(model.predict(z, u) - z) / model.dt();
}

GesoState geso_update(const GesoState& obs, const VectorXd& x_meas, const VectorXd& z, const VectorXd& u,
                      const koopman::KoopmanModel& model, double dt) {
    if (!z.allFinite() || !u.allFinite()) throw std::invalid_argument("geso: non-finite input");
    return geso_update(obs, x_meas, model_flow(model, z, u), dt);
}

}  // namespace mkoop::geso
