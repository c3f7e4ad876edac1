#include "mkoop/lifting.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "mkoop/simd/kernels.hpp"

namespace mkoop::lifting {
namespace {

void activate(Activation a, std::span<double> v) {
    switch (a) {
        case Activation::tanh:
            for (double& x : v) x = std::tanh(x);
            break;
        case Activation::elu:
            for (double& x : v) x = x > 0.0 ? x : std::expm1(x);
            break;
        case Activation::linear: break;
    }
}

// delta <- delta * f'(pre) written through the activation output y.
void activation_grad(Activation a, std::span<const double> y, std::span<double> delta) {
    switch (a) {
        case Activation::tanh:
            simd::kernels().tanh_grad(y.size(), y.data(), delta.data(), delta.data());
            break;
        case Activation::elu:
            for (std::size_t i = 0; i < y.size(); ++i) {
                if (y[i] <= 0.0) delta[i] *= (y[i] + 1.0);
            }
            break;
        case Activation::linear: break;
    }
}

void transpose(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& dst) {
    dst.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

}  // namespace

std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::elu: return "elu";
        case Activation::linear: return "linear";
    }
    return "linear";
}

Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "elu") return Activation::elu;
    if (s == "linear") return Activation::linear;
    throw std::invalid_argument("activation: unknown value '" + s + "'");
}

EncoderNetwork::EncoderNetwork(int input_dim, const EncoderSpec& spec, std::uint64_t seed)
    : seed_(seed) {
    if (input_dim <= 0 || spec.features <= 0) throw std::invalid_argument("encoder: bad dimensions");
    int prev = input_dim;
    for (int h : spec.hidden) {
        if (h <= 0) throw std::invalid_argument("encoder: hidden width must be positive");
        layers_.push_back({prev, h, spec.hidden_activation});
        prev = h;
    }
    layers_.push_back({prev, spec.features, Activation::linear});
    layout();

    // Uniform fan-in initialization.
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layers_[l].in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& w : weights(l)) w = dist(rng);
        for (double& b : bias(l)) b = dist(rng);
    }
}

EncoderNetwork::EncoderNetwork(std::vector<LayerShape> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw std::invalid_argument("encoder: no layers");
    for (std::size_t l = 1; l < layers_.size(); ++l) {
        if (layers_[l].in != layers_[l - 1].out) throw std::invalid_argument("encoder: layer dims do not chain");
    }
    layout();
}

void EncoderNetwork::layout() {
    offsets_.clear();
    std::size_t total = 0;
    for (const auto& l : layers_) {
        offsets_.push_back(total);
        total += static_cast<std::size_t>(l.out) * (l.in + 1);
    }
    params_.assign(total, 0.0);
    mean_ = VectorXd::Zero(input_dim());
    std_ = VectorXd::Ones(input_dim());
}

std::span<const double> EncoderNetwork::weights(std::size_t l) const {
    return std::span<const double>(params_).subspan(offsets_[l],
                                                    static_cast<std::size_t>(layers_[l].out) * layers_[l].in);
}
std::span<double> EncoderNetwork::weights(std::size_t l) {
    return std::span<double>(params_).subspan(offsets_[l], static_cast<std::size_t>(layers_[l].out) * layers_[l].in);
}
std::span<const double> EncoderNetwork::bias(std::size_t l) const {
    return std::span<const double>(params_).subspan(
        offsets_[l] + static_cast<std::size_t>(layers_[l].out) * layers_[l].in, layers_[l].out);
}
std::span<double> EncoderNetwork::bias(std::size_t l) {
    return std::span<double>(params_).subspan(
        offsets_[l] + static_cast<std::size_t>(layers_[l].out) * layers_[l].in, layers_[l].out);
}

void EncoderNetwork::set_normalization(const VectorXd& mean, const VectorXd& stddev) {
    if (mean.size() != input_dim() || stddev.size() != input_dim()) {
        throw std::invalid_argument("encoder normalization: dimension mismatch");
    }
    if ((stddev.array() <= 0.0).any()) throw std::invalid_argument("encoder normalization: std must be positive");
    mean_ = mean;
    std_ = stddev;
}

VectorXd EncoderNetwork::features(const VectorXd& x) const {
    Workspace ws;
    const auto out = forward(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), 1, ws);
    return Eigen::Map<const VectorXd>(out.data(), feature_count());
}

std::span<const double> EncoderNetwork::forward(std::span<const double> x, std::size_t batch,
                                                Workspace& ws) const {
    const auto in_dim = static_cast<std::size_t>(input_dim());
    if (x.size() != batch * in_dim) throw std::invalid_argument("encoder forward: input size mismatch");
    const auto& k = simd::kernels();
    ws.batch = batch;
    ws.activations.resize(layers_.size() + 1);
    auto& a0 = ws.activations[0];
    a0.resize(x.size());
    for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t c = 0; c < in_dim; ++c) {
            a0[r * in_dim + c] = (x[r * in_dim + c] - mean_[static_cast<Eigen::Index>(c)]) /
                                 std_[static_cast<Eigen::Index>(c)];
        }
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto in = static_cast<std::size_t>(layers_[l].in);
        const auto out = static_cast<std::size_t>(layers_[l].out);
        transpose(weights(l).data(), out, in, ws.transposed);
        auto& y = ws.activations[l + 1];
        y.resize(batch * out);
        k.gemm(batch, out, in, ws.activations[l].data(), in, ws.transposed.data(), out, y.data(), out, false);
        k.add_bias(batch, out, bias(l).data(), y.data());
        activate(layers_[l].activation, y);
    }
    return ws.activations.back();
}

void EncoderNetwork::backward(Workspace& ws, std::span<const double> d_out, std::span<double> grad,
                              std::span<double> d_input) const {
    const std::size_t batch = ws.batch;
    if (d_out.size() != batch * static_cast<std::size_t>(feature_count())) {
        throw std::invalid_argument("encoder backward: gradient size mismatch");
    }
    if (grad.size() != params_.size()) throw std::invalid_argument("encoder backward: grad size mismatch");
    const auto& k = simd::kernels();
    ws.delta.assign(d_out.begin(), d_out.end());
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const auto in = static_cast<std::size_t>(layers_[li].in);
        const auto out = static_cast<std::size_t>(layers_[li].out);
        activation_grad(layers_[li].activation, ws.activations[li + 1], ws.delta);

        // dW += delta^T * a_in ; db += column sums of delta
        transpose(ws.delta.data(), batch, out, ws.transposed);
        double* gw = grad.data() + offsets_[li];
        double* gb = gw + out * in;
        k.gemm(out, in, batch, ws.transposed.data(), batch, ws.activations[li].data(), in, gw, in, true);
        for (std::size_t r = 0; r < batch; ++r) k.axpy(out, 1.0, ws.delta.data() + r * out, gb);

        if (li == 0 && d_input.empty()) break;
        ws.delta_prev.resize(batch * in);
        k.gemm(batch, in, out, ws.delta.data(), out, weights(li).data(), in, ws.delta_prev.data(), in, false);
        ws.delta.swap(ws.delta_prev);
    }
    if (!d_input.empty()) {
        const auto in_dim = static_cast<std::size_t>(input_dim());
        if (d_input.size() != batch * in_dim) throw std::invalid_argument("encoder backward: d_input size mismatch");
        for (std::size_t r = 0; r < batch; ++r) {
            for (std::size_t c = 0; c < in_dim; ++c) {
                d_input[r * in_dim + c] = ws.delta[r * in_dim + c] / std_[static_cast<Eigen::Index>(c)];
            }
        }
    }
}

nlohmann::json EncoderNetwork::to_json() const {
    nlohmann::json jl = nlohmann::json::array();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto w = weights(l);
        const auto b = bias(l);
        jl.push_back({{"in", layers_[l].in},
                      {"out", layers_[l].out},
                      {"activation", to_string(layers_[l].activation)},
                      {"weights", std::vector<double>(w.begin(), w.end())},
                      {"bias", std::vector<double>(b.begin(), b.end())}});
    }
    return {{"layers", jl},
            {"input_mean", std::vector<double>(mean_.data(), mean_.data() + mean_.size())},
            {"input_std", std::vector<double>(std_.data(), std_.data() + std_.size())},
            {"seed", seed_}};
}

EncoderNetwork EncoderNetwork::from_json(const nlohmann::json& j) {
    std::vector<LayerShape> shapes;
    for (const auto& e : j.at("layers")) {
        shapes.push_back({e.at("in").get<int>(), e.at("out").get<int>(),
                          activation_from_string(e.at("activation").get<std::string>())});
    }
    EncoderNetwork net(shapes);
    const auto& jl = j.at("layers");
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        const auto w = jl[l].at("weights").get<std::vector<double>>();
        const auto b = jl[l].at("bias").get<std::vector<double>>();
        auto ws = net.weights(l);
        auto bs = net.bias(l);
        if (w.size() != ws.size() || b.size() != bs.size()) {
            throw std::invalid_argument("encoder layer " + std::to_string(l) + ": weight array size mismatch");
        }
        std::copy(w.begin(), w.end(), ws.begin());
        std::copy(b.begin(), b.end(), bs.begin());
    }
    const auto mean = j.at("input_mean").get<std::vector<double>>();
    const auto sd = j.at("input_std").get<std::vector<double>>();
    net.set_normalization(Eigen::Map<const VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size())),
                          Eigen::Map<const VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size())));
    net.seed_ = j.value("seed", std::uint64_t{0});
    return net;
}

VectorXd lift(const EncoderNetwork& net, const VectorXd& x) {
    if (x.size() != net.input_dim()) throw std::invalid_argument("lift: state dimension mismatch");
    VectorXd z(x.size() + net.feature_count());
    z << x, net.features(x);
    return z;
}

}  // namespace mkoop::lifting
