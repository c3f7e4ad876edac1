#pragma once

// Snapshot datasets and gradient training of lifted models.
//
// Each trajectory stores w consecutive states; the snapshot pair matrices are
// the views X = states[:, 0..w-2] and Y = states[:, 1..w-1], so Y is shifted X
// by construction. Actuated trajectories also hold the w-1 applied inputs.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mkoop/dynamics.hpp"
#include "mkoop/koopman.hpp"
#include "mkoop/lifting.hpp"

namespace mkoop::training {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using koopman::StateConvention;
using koopman::Variant;

enum class DatasetKind { actuated, unactuated };
std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

/// Zero-order-hold random torques, optionally shaped by gravity
/// compensation and velocity damping, clipped to +-input_bound.
struct ExcitationSpec {
    double hold = 0.1;          // s between torque re-draws
    double amplitude = 2.0;     // random torque range [-a, a] (N*m)
    double input_bound = 10.0;  // applied torque clip (N*m)
    bool gravity_compensation = false;
    double damping = 0.0;       // N*m*s/rad
    double q_range = 3.14159265358979323846;  // initial q ~ U[-r, r]
    double qd_range = 1.0;                     // initial q' ~ U[-r, r]

    static ExcitationSpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct Trajectory {
    MatrixXd states;  // 2n x w
    MatrixXd inputs;  // m x (w-1); empty for unactuated data
    std::uint64_t seed = 0;

    int snapshots() const { return static_cast<int>(states.cols()); }
    auto X() const { return states.leftCols(states.cols() - 1); }
    auto Y() const { return states.rightCols(states.cols() - 1); }
};

struct TrajectoryDataset {
    DatasetKind kind = DatasetKind::actuated;
    StateConvention convention = StateConvention::momentum;
    int n = 0;
    int m = 0;
    double dt = 0.01;
    std::uint64_t seed = 0;
    int resampled = 0;  // trajectories redrawn after divergence
    nlohmann::json manipulator;
    nlohmann::json excitation;
    std::vector<Trajectory> trajectories;

    std::size_t pair_count() const;
};

/// Simulates p trajectories of w snapshots in explicit [q; q'] coordinates.
TrajectoryDataset generate_dataset(const dynamics::ManipulatorModel& model, DatasetKind kind, int p, int w,
                                   double dt, const ExcitationSpec& excitation, std::uint64_t seed,
                                   StateConvention convention = StateConvention::momentum);

/// Re-expresses every stored state in another convention.
TrajectoryDataset convert_dataset(const TrajectoryDataset& ds, const dynamics::ManipulatorModel& model,
                                  StateConvention convention);

/// Manifest JSON plus one CSV per trajectory (traj_0000.csv, ...).
void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir);
TrajectoryDataset load_dataset(const std::filesystem::path& dir);

struct TrainConfig {
    double alpha1 = 1.0;
    double alpha2 = 1.0;
    double gamma1 = 1e-5;
    double gamma2 = 1e-4;
    double learning_rate = 1e-3;
    double lr_final_ratio = 0.1;  // learning rate decays exponentially to this fraction
    int batch_size = 256;
    int epochs = 200;
    std::uint64_t seed = 0;
    lifting::EncoderSpec encoder;
    double validation_fraction = 0.1;
    int patience = 20;
    int horizon = 1;                  // steps in the prediction loss; 1 = one-step
    std::size_t samples_per_epoch = 0;  // 0 = every training window once per epoch
    std::size_t validation_samples = 4096;
    bool least_squares_init = true;

    void validate() const;
    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Windows of horizon+1 consecutive states and horizon inputs.
struct WindowBatch {
    int horizon = 1;
    std::vector<VectorXd> states;  // window-major: [b * (horizon+1) + j]
    std::vector<VectorXd> inputs;  // [b * horizon + j]; empty when unactuated

    std::size_t windows() const { return states.size() / static_cast<std::size_t>(horizon + 1); }
};

struct LossValue {
    double total = 0.0;
    double prediction = 0.0;  // mean ||x_{k+1} - C^x zhat_{k+1}||
    double lifting = 0.0;     // mean ||z_{k+1} - zhat_{k+1}||
    double regularization = 0.0;
};

/// Loss of one batch. With `gradient` non-null, fills dL/dtheta in the layout of
/// pack_parameters().
LossValue loss(const koopman::KoopmanModel& model, const WindowBatch& batch, const TrainConfig& cfg,
               std::vector<double>* gradient = nullptr);

/// theta = [encoder | A row-major | B row-major when learnable].
std::vector<double> pack_parameters(const koopman::KoopmanModel& model);
void unpack_parameters(std::span<const double> theta, koopman::KoopmanModel& model);

struct TrainReport {
    std::vector<double> train_loss;
    std::vector<double> validation_loss;
    int best_epoch = -1;
    bool early_stopped = false;
};

using EpochCallback = std::function<void(int epoch, double train_loss, double val_loss)>;

/// Trains a fresh model of `variant` on `ds`. The proposed variant accepts
/// actuated or unactuated momentum data; the baselines need actuated explicit data.
koopman::KoopmanModel train(const TrajectoryDataset& ds, const TrainConfig& cfg, Variant variant,
                            TrainReport* report = nullptr, const EpochCallback& on_epoch = {});

}  // namespace mkoop::training
