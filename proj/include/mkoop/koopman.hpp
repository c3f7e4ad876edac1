#pragma once

// Lifted linear / bilinear predictors.
//
//   proposed  z+ = A z + B u,          B = dt * E fixed, state [q; M(q) q']
//   nlk       z+ = A z + B u,          B learned (L x m), state [q; q']
//   nbk       z+ = A z + E B (z (x) u), B learned (m x L*m), state [q; q']
//
// with L = 2n + N, E = [0_{n x m}; I_{n x m}; 0_{N x m}] the velocity/momentum
// input channel, and (z (x) u)[i*m + j] = z_i u_j (z-major Kronecker order).
// C^x = [I_{2n}, 0] recovers the physical state exactly.

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mkoop/dynamics.hpp"
#include "mkoop/lifting.hpp"

namespace mkoop::koopman {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Variant { proposed, nlk, nbk };
enum class StateConvention { momentum, explicit_velocity };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
std::string to_string(StateConvention c);
StateConvention convention_from_string(const std::string& s);

/// Coordinates each variant is defined over.
StateConvention natural_convention(Variant v);

class KoopmanModel {
  public:
    KoopmanModel(Variant variant, int n, int m, double dt, lifting::EncoderNetwork encoder);

    Variant variant() const { return variant_; }
    StateConvention convention() const { return natural_convention(variant_); }
    int dof() const { return n_; }
    int inputs() const { return m_; }
    int features() const { return encoder_.feature_count(); }
    int state_dim() const { return 2 * n_; }
    int lifted_dim() const { return 2 * n_ + features(); }
    double dt() const { return dt_; }

    const MatrixXd& A() const { return a_; }
    const MatrixXd& B() const { return b_; }
    void set_A(const MatrixXd& a);
    /// Rejected for the proposed variant, whose B is fixed.
    void set_B(const MatrixXd& b);
    bool input_matrix_learnable() const { return variant_ != Variant::proposed; }

    const lifting::EncoderNetwork& encoder() const { return encoder_; }
    lifting::EncoderNetwork& encoder() { return encoder_; }

    /// Per-dimension scale of the physical state used to standardize losses.
    const VectorXd& state_scale() const { return state_scale_; }
    void set_state_scale(const VectorXd& s);

    /// E = [0; I_{n x m}; 0], L x m.
    MatrixXd input_channel() const;

    VectorXd lift(const VectorXd& x) const;
    VectorXd recover(const VectorXd& z) const { return z.head(state_dim()); }
    VectorXd predict(const VectorXd& z, const VectorXd& u) const;

    nlohmann::json& metadata() { return metadata_; }
    const nlohmann::json& metadata() const { return metadata_; }

    nlohmann::json to_json() const;
    static KoopmanModel from_json(const nlohmann::json& j);

  private:
    Variant variant_;
    int n_;
    int m_;
    double dt_;
    lifting::EncoderNetwork encoder_;
    MatrixXd a_;
    MatrixXd b_;
    VectorXd state_scale_;
    nlohmann::json metadata_ = nlohmann::json::object();
};

/// z (x) u in z-major order.
VectorXd kron(const VectorXd& z, const VectorXd& u);

struct Rollout {
    std::vector<VectorXd> states;          // C^x z_k, k = 0..H (truncated on divergence)
    std::optional<int> diverged_at;        // first step with a non-finite state
};

/// Lifts x0 once and iterates predict; never re-lifts.
Rollout rollout(const KoopmanModel& model, const VectorXd& x0, const std::vector<VectorXd>& inputs);

std::size_t count_learnable_params(const KoopmanModel& model);

/// Converts a state in the given convention to explicit [q; q'].
VectorXd to_explicit(const dynamics::ManipulatorModel& manip, StateConvention c, const VectorXd& x);
VectorXd from_explicit(const dynamics::ManipulatorModel& manip, StateConvention c, const VectorXd& x);

struct StandardizedError {
    double value = 0.0;
    std::vector<int> excluded_dims;  // zero-variance ground-truth dimensions
};

/// Per-dimension RMSE over all samples divided by the per-dimension standard
/// deviation of the truth, averaged over dimensions.
StandardizedError standardized_error(const std::vector<VectorXd>& pred, const std::vector<VectorXd>& truth);

/// Same metric after mapping both trajectories to explicit coordinates.
StandardizedError standardized_error(const std::vector<VectorXd>& pred, StateConvention pred_conv,
                                     const std::vector<VectorXd>& truth, StateConvention truth_conv,
                                     const dynamics::ManipulatorModel& manip);

nlohmann::json matrix_to_json(const MatrixXd& m);
MatrixXd matrix_from_json(const nlohmann::json& j);

}  // namespace mkoop::koopman
