#pragma once

// End-to-end experiments: reference paths, inverse kinematics, closed-loop
// tracking under disturbances, the open-loop prediction benchmark and report
// emission.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mkoop/dynamics.hpp"
#include "mkoop/io.hpp"
#include "mkoop/koopman.hpp"
#include "mkoop/mpc.hpp"
#include "mkoop/training.hpp"

namespace mkoop::harness {

using Eigen::Vector3d;
using Eigen::VectorXd;

// ---------------------------------------------------------------- paths

enum class PathKind { hypotrochoid, petal, helix };
std::string to_string(PathKind k);
PathKind path_kind_from_string(const std::string& s);

/// Curve parameter theta(t) = omega * g(t) with the C1 ease-in
/// g(t) = t^2 / (2 T) for t < T and t - T/2 afterwards.
struct PathSpec {
    PathKind kind = PathKind::hypotrochoid;
    // hypotrochoid: big radius R, rolling radius r, pen offset d (unitless, times scale)
    double big_r = 5.0;
    double small_r = 3.0;
    double pen = 5.0;
    // petal: rho = petal_amplitude * cos(petal_k * theta)
    double petal_amplitude = 0.12;
    double petal_k = 2.0;
    // helix: circle of helix_radius with axial advance helix_pitch per radian
    double helix_radius = 0.1;
    double helix_pitch = 0.01;
    double scale = 0.02;       // hypotrochoid units to metres
    double omega = 0.5;        // rad/s of the curve parameter
    double ramp = 1.0;         // s, ease-in duration
    Vector3d center{0.45, 0.0, 0.25};
    Vector3d u_axis = Vector3d::UnitY();  // in-plane axes of the curve
    Vector3d v_axis = Vector3d::UnitZ();
    Vector3d axial = Vector3d::UnitX();   // helix advance direction

    static PathSpec defaults(PathKind kind);
    static PathSpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

double ease(double t, double ramp);
Vector3d reference_path(const PathSpec& spec, double t);

// ---------------------------------------------------------------- IK

class IkError : public std::runtime_error {
  public:
    IkError(const std::string& what, double residual) : std::runtime_error(what), residual_(residual) {}
    double residual() const { return residual_; }

  private:
    double residual_;
};

class UnreachableError : public IkError {
  public:
    using IkError::IkError;
};

struct IkOptions {
    double tolerance = 1e-6;
    int max_iterations = 500;
    double damping = 1e-2;
    double max_step = 0.3;  // rad per iteration
};

/// Damped least-squares iteration on ee_position.
VectorXd inverse_kinematics(const dynamics::ManipulatorModel& model, const Vector3d& point, const VectorXd& q_guess,
                            const IkOptions& opt = {});

/// Distance of `point` from the outer reach sphere (positive = inside).
double workspace_margin(const dynamics::ManipulatorModel& model, const Vector3d& point);

// ---------------------------------------------------------------- tracking

/// Full manipulator JSON (with "links") or the uniform-chain shorthand
/// {n, mass = 0.6, length = 0.33, topology = "spatial"}.
dynamics::ManipulatorModel manipulator_from_config(const nlohmann::json& j);

enum class DisturbanceCase { d0, d1, d2, d3 };
std::string to_string(DisturbanceCase c);
DisturbanceCase disturbance_case_from_string(const std::string& s);
/// none; tau_d = -0.6 u; tau_d = 10 N*m per joint; F_d = [20, 20, 20] N at the end effector.
dynamics::DisturbanceSpec disturbance_for(DisturbanceCase c, int n);

struct TrackingConfig {
    PathSpec path;
    double duration = 20.0;
    int plant_substeps = 1;
    VectorXd q_guess;  // IK seed for the first path point; empty = default elbow pose
    dynamics::DisturbanceSpec disturbance;
    std::string disturbance_label = "d0";
    mpc::MpcConfig controller;
    std::uint64_t seed = 0;

    static TrackingConfig from_json(const nlohmann::json& j, int n);
    nlohmann::json to_json() const;
};

struct JointReference {
    std::vector<VectorXd> q;   // q_ref at t_k = k dt
    std::vector<VectorXd> qd;  // central differences
    std::vector<Vector3d> points;
};

/// IK along the path at the control rate, `extra` samples past the end.
JointReference joint_reference(const dynamics::ManipulatorModel& model, const PathSpec& path, double duration,
                               double dt, int extra, const VectorXd& q_guess);

struct TrackingLog {
    std::vector<double> t;
    std::vector<VectorXd> q_ref, q, u, d_hat;
    std::vector<int> iterations;
    std::vector<double> kkt;

    std::string to_csv() const;
};

struct TrackingResult {
    double task_rmse = 0.0;   // m
    double joint_rmse = 0.0;  // rad
    double max_task_error = 0.0;
    int solver_faults = 0;
    bool diverged = false;
    TrackingLog log;
    nlohmann::json to_json() const;
};

TrackingResult run_tracking_experiment(const dynamics::ManipulatorModel& plant, const koopman::KoopmanModel& model,
                                       const TrackingConfig& cfg);

// ---------------------------------------------------------------- prediction benchmark

struct PredictionBenchmarkConfig {
    std::vector<int> chains{2, 3};
    std::vector<int> dataset_sizes{100, 250};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<koopman::Variant> variants{koopman::Variant::proposed, koopman::Variant::nlk, koopman::Variant::nbk};
    int snapshots = 1000;
    double dt = 0.01;
    int test_trajectories = 25;
    int window = 100;
    double link_mass = 0.6;
    double link_length = 0.33;
    dynamics::Topology topology = dynamics::Topology::planar;
    training::ExcitationSpec excitation;
    training::TrainConfig train;
    int jobs = 1;

    static PredictionBenchmarkConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct PredictionRow {
    int chain = 0;
    int trajectories = 0;
    koopman::Variant variant = koopman::Variant::proposed;
    std::uint64_t seed = 0;
    double error = 0.0;
    std::size_t parameters = 0;
    double train_seconds = 0.0;
    int best_epoch = 0;
    std::string config_hash;
    std::string model_hash;
};

struct PredictionReport {
    std::vector<PredictionRow> rows;
    nlohmann::json config;

    /// Median error over seeds for one cell; NaN when absent.
    double median(int chain, int trajectories, koopman::Variant v) const;
    std::string to_csv() const;
    nlohmann::json summary() const;
};

/// Held-out rollout error: non-overlapping windows of `window` steps, pooled
/// per dimension in explicit coordinates.
double held_out_error(const koopman::KoopmanModel& model, const dynamics::ManipulatorModel& manip,
                      const training::TrajectoryDataset& test_explicit, int window);

using ProgressFn = std::function<void(const std::string&)>;

PredictionReport run_prediction_benchmark(const PredictionBenchmarkConfig& cfg, const ProgressFn& progress = {});

// ---------------------------------------------------------------- reports

struct TrackingRow {
    std::string path;
    std::string disturbance;
    std::string variant;
    bool geso = true;
    std::uint64_t seed = 0;
    double task_rmse = 0.0;
    double joint_rmse = 0.0;
    std::string config_hash;
    std::string model_hash;
};

std::string tracking_rows_csv(const std::vector<TrackingRow>& rows);

/// Inverse of the CSV emitters; throws std::invalid_argument on a foreign header.
std::vector<TrackingRow> tracking_rows_from_csv(const io::CsvTable& table);
std::vector<PredictionRow> prediction_rows_from_csv(const io::CsvTable& table);

/// Writes report.csv, summary.json and plot.py into `dir`.
void write_prediction_report(const PredictionReport& report, const std::filesystem::path& dir);
void write_tracking_report(const std::vector<TrackingRow>& rows, const std::filesystem::path& dir);

/// Runs tasks on up to `jobs` worker threads; rethrows the first failure.
void run_jobs(std::size_t count, int jobs, const std::function<void(std::size_t)>& task);

}  // namespace mkoop::harness
