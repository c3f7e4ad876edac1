#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mkoop/lifting.hpp"

using namespace mkoop::lifting;
using Eigen::VectorXd;

namespace {

EncoderNetwork small_net(Activation act, std::uint64_t seed) {
    EncoderSpec spec;
    spec.hidden = {7, 5};
    spec.features = 4;
    spec.hidden_activation = act;
    EncoderNetwork net(3, spec, seed);
    net.set_normalization(Eigen::Vector3d(0.1, -0.2, 0.3), Eigen::Vector3d(1.5, 0.7, 2.0));
    return net;
}

// Scalar objective sum_{b,f} c[b,f] * phi(x_b)[f].
double objective(const EncoderNetwork& net, const std::vector<double>& x, std::size_t batch,
                 const std::vector<double>& c) {
    EncoderNetwork::Workspace ws;
    const auto out = net.forward(x, batch, ws);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += c[i] * out[i];
    return s;
}

}  // namespace

TEST_CASE("zero parameters give zero observables") {
    EncoderNetwork net({{4, 6, Activation::tanh}, {6, 3, Activation::linear}});
    const VectorXd phi = net.features(VectorXd::LinSpaced(4, -1, 1));
    CHECK(phi.size() == 3);
    CHECK(phi.norm() == 0.0);
    const VectorXd z = lift(net, VectorXd::LinSpaced(4, -1, 1));
    CHECK(z.size() == 7);
    CHECK((z.head(4) - VectorXd::LinSpaced(4, -1, 1)).norm() == 0.0);
}

TEST_CASE("layer dimensions must chain") {
    CHECK_THROWS(EncoderNetwork({{4, 6, Activation::tanh}, {5, 3, Activation::linear}}));
    CHECK_THROWS(EncoderNetwork(0, EncoderSpec{}, 1));
}

TEST_CASE("parameter count and seeded initialization") {
    const auto a = small_net(Activation::tanh, 3);
    const auto b = small_net(Activation::tanh, 3);
    const auto c = small_net(Activation::tanh, 4);
    CHECK(a.parameter_count() == static_cast<std::size_t>(7 * 4 + 5 * 8 + 4 * 6));
    CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
    CHECK(!std::equal(a.parameters().begin(), a.parameters().end(), c.parameters().begin()));
}

TEST_CASE("batched forward agrees with single-sample features") {
    const auto net = small_net(Activation::tanh, 9);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    const std::size_t batch = 11;
    std::vector<double> x(batch * 3);
    for (auto& v : x) v = nd(rng);
    EncoderNetwork::Workspace ws;
    const auto out = net.forward(x, batch, ws);
    for (std::size_t b = 0; b < batch; ++b) {
        const VectorXd phi = net.features(Eigen::Map<const VectorXd>(&x[b * 3], 3));
        for (int f = 0; f < 4; ++f) CHECK(out[b * 4 + f] == doctest::Approx(phi[f]).epsilon(1e-12));
    }
}

TEST_CASE("backward matches finite differences over 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto net = small_net(seed % 2 == 0 ? Activation::tanh : Activation::elu, seed);
        std::mt19937_64 rng(1000 + seed);
        std::normal_distribution<double> nd;
        const std::size_t batch = 5;
        std::vector<double> x(batch * 3), c(batch * 4);
        for (auto& v : x) v = nd(rng);
        for (auto& v : c) v = nd(rng);

        EncoderNetwork::Workspace ws;
        net.forward(x, batch, ws);
        std::vector<double> grad(net.parameter_count(), 0.0), dx(x.size(), 0.0);
        net.backward(ws, c, grad, dx);

        const double h = 1e-6;
        auto params = net.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double keep = params[i];
            params[i] = keep + h;
            const double up = objective(net, x, batch, c);
            params[i] = keep - h;
            const double down = objective(net, x, batch, c);
            params[i] = keep;
            CHECK(grad[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6).scale(1.0));
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            auto xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            CHECK(dx[i] == doctest::Approx((objective(net, xp, batch, c) - objective(net, xm, batch, c)) / (2 * h))
                               .epsilon(1e-6)
                               .scale(1.0));
        }
    }
}

TEST_CASE("backward accumulates into the gradient buffer") {
    const auto net = small_net(Activation::tanh, 5);
    std::vector<double> x{0.1, 0.2, 0.3}, c{1, -1, 0.5, 2};
    EncoderNetwork::Workspace ws;
    net.forward(x, 1, ws);
    std::vector<double> once(net.parameter_count(), 0.0), twice(net.parameter_count(), 0.0);
    net.backward(ws, c, once);
    net.backward(ws, c, twice);
    net.backward(ws, c, twice);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice[i] == doctest::Approx(2 * once[i]));
}

TEST_CASE("JSON round trip preserves the map") {
    const auto net = small_net(Activation::elu, 21);
    const auto back = EncoderNetwork::from_json(net.to_json());
    CHECK(back.parameter_count() == net.parameter_count());
    const VectorXd x = Eigen::Vector3d(0.4, -1.2, 2.2);
    CHECK((back.features(x) - net.features(x)).norm() == 0.0);
    CHECK((back.input_std() - net.input_std()).norm() == 0.0);
}

TEST_CASE("normalization rejects non-positive scale") {
    auto net = small_net(Activation::tanh, 1);
    CHECK_THROWS(net.set_normalization(Eigen::Vector3d::Zero(), Eigen::Vector3d(1, 0, 1)));
    CHECK_THROWS(net.set_normalization(Eigen::Vector2d::Zero(), Eigen::Vector2d::Ones()));
}
