#include <doctest.h>

#include <cmath>
#include <complex>
#include <stdexcept>

#include "mkoop/geso.hpp"

using namespace mkoop;
using namespace mkoop::geso;
using Eigen::VectorXd;

TEST_CASE("step disturbance is estimated within 1% in 0.5 s") {
    // Plant x' = d with the model flow known exactly (zero), d steps to 3 at t = 0.
    const double dt = 0.001, d = 3.0;
    GesoState obs = GesoState::initial(VectorXd::Zero(1), 40.0, 800.0);
    double x = 0.0;
    for (int k = 0; k < 500; ++k) {
        obs = geso_update(obs, VectorXd::Constant(1, x), VectorXd::Zero(1), dt);
        x += d * dt;
    }
    CHECK(std::abs(obs.d_hat[0] - d) / d < 0.01);
}

TEST_CASE("error decay rate matches the observer poles") {
    // The update is linear in (x_hat, d_hat) for a zero measurement and flow,
    // so its columns are the images of the unit vectors.
    const double dt = 0.01;
    Eigen::Matrix2d map;
    for (int c = 0; c < 2; ++c) {
        GesoState s{VectorXd::Constant(1, c == 0 ? 1.0 : 0.0), VectorXd::Constant(1, c == 1 ? 1.0 : 0.0), 40.0, 800.0};
        const auto next = geso_update(s, VectorXd::Zero(1), VectorXd::Zero(1), dt);
        map(0, c) = next.x_hat[0];
        map(1, c) = next.d_hat[0];
    }
    const auto eig = map.eigenvalues();
    for (int i = 0; i < 2; ++i) {
        const double rate = std::log(std::abs(eig[i])) / dt;
        CHECK(std::abs(rate + 20.0) / 20.0 < 0.1);
    }
}

TEST_CASE("state estimate tracks the measurement with no disturbance") {
    GesoState obs = GesoState::initial(Eigen::Vector2d(1.0, -1.0), 40.0, 800.0);
    for (int k = 0; k < 50; ++k) obs = geso_update(obs, Eigen::Vector2d(1.0, -1.0), Eigen::Vector2d::Zero(), 0.01);
    CHECK((obs.x_hat - Eigen::Vector2d(1.0, -1.0)).norm() == 0.0);
    CHECK(obs.d_hat.norm() == 0.0);
}

TEST_CASE("model flow is the discrete rate of the recovered state") {
    lifting::EncoderSpec spec;
    spec.hidden = {4};
    spec.features = 2;
    koopman::KoopmanModel model(koopman::Variant::nlk, 1, 1, 0.01, lifting::EncoderNetwork(2, spec, 1));
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(4, 4);
    a(0, 1) = 0.01;
    model.set_A(a);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(4, 1);
    b(1, 0) = 0.02;
    model.set_B(b);
    const VectorXd z = model.lift(Eigen::Vector2d(0.5, 2.0));
    const VectorXd flow = model_flow(model, z, VectorXd::Constant(1, 3.0));
    CHECK(flow[0] == doctest::Approx(2.0));
    CHECK(flow[1] == doctest::Approx(6.0));
}

TEST_CASE("invalid observer input is rejected") {
    CHECK_THROWS_AS(GesoState::initial(VectorXd::Zero(2), 0.0, 800.0), std::invalid_argument);
    const auto obs = GesoState::initial(VectorXd::Zero(2), 40.0, 800.0);
    CHECK_THROWS_AS(geso_update(obs, VectorXd::Zero(3), VectorXd::Zero(2), 0.01), std::invalid_argument);
    CHECK_THROWS_AS(geso_update(obs, VectorXd::Zero(2), VectorXd::Zero(2), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(geso_update(obs, VectorXd::Constant(2, NAN), VectorXd::Zero(2), 0.01), std::invalid_argument);
}
