#pragma once

// Feed-forward encoder producing the observables phi(x), and the stacked lift
// z = [x; phi(x)].
//
// Parameters live in one flat buffer, layer by layer: W_l (out x in, row-major)
// followed by b_l. Layer views are spans into that buffer, so flattening is the
// identity. Inputs are standardized with per-dimension mean/std before the
// first layer.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace mkoop::lifting {

using Eigen::VectorXd;

enum class Activation { tanh, elu, linear };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct LayerShape {
    int in = 0;
    int out = 0;
    Activation activation = Activation::tanh;
};

struct EncoderSpec {
    std::vector<int> hidden{128, 128, 128};
    int features = 64;
    Activation hidden_activation = Activation::tanh;
};

class EncoderNetwork {
  public:
    EncoderNetwork() = default;
    EncoderNetwork(int input_dim, const EncoderSpec& spec, std::uint64_t seed);
    explicit EncoderNetwork(std::vector<LayerShape> layers);

    int input_dim() const { return layers_.empty() ? 0 : layers_.front().in; }
    int feature_count() const { return layers_.empty() ? 0 : layers_.back().out; }
    std::size_t parameter_count() const { return params_.size(); }
    const std::vector<LayerShape>& layers() const { return layers_; }
    std::uint64_t seed() const { return seed_; }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::span<const double> weights(std::size_t layer) const;
    std::span<const double> bias(std::size_t layer) const;
    std::span<double> weights(std::size_t layer);
    std::span<double> bias(std::size_t layer);

    void set_normalization(const VectorXd& mean, const VectorXd& stddev);
    const VectorXd& input_mean() const { return mean_; }
    const VectorXd& input_std() const { return std_; }

    VectorXd features(const VectorXd& x) const;

    /// Per-batch activations; reusable across calls.
    struct Workspace {
        std::size_t batch = 0;
        std::vector<std::vector<double>> activations;  // [0] = standardized input
        std::vector<double> transposed;
        std::vector<double> delta;
        std::vector<double> delta_prev;
    };

    /// x is row-major (batch x input_dim); returns a view of the row-major
    /// (batch x features) output held in ws.
    std::span<const double> forward(std::span<const double> x, std::size_t batch,
                                    Workspace& ws) const;

    /// Reverse pass for the batch last seen by forward(). d_out is dL/dphi
    /// (batch x features); parameter gradients are added into grad.
    /// d_input, when non-empty, receives dL/dx (batch x input_dim).
    void backward(Workspace& ws, std::span<const double> d_out, std::span<double> grad,
                  std::span<double> d_input = {}) const;

    nlohmann::json to_json() const;
    static EncoderNetwork from_json(const nlohmann::json& j);

  private:
    void layout();

    std::vector<LayerShape> layers_;
    std::vector<std::size_t> offsets_;
    std::vector<double> params_;
    VectorXd mean_;
    VectorXd std_;
    std::uint64_t seed_ = 0;
};

/// z = [x; phi(x)].
VectorXd lift(const EncoderNetwork& net, const VectorXd& x);

}  // namespace mkoop::lifting
