#include "mkoop/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include "mkoop/io.hpp"

namespace mkoop::harness {

namespace {

Vector3d vec3(const nlohmann::json& j, const Vector3d& fallback) {
    if (j.is_null()) return fallback;
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 3) throw std::invalid_argument("expected a 3-vector");
    return {v[0], v[1], v[2]};
}

nlohmann::json json3(const Vector3d& v) { return {v.x(), v.y(), v.z()}; }

nlohmann::json json_vec(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

double median_of(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace

// ---------------------------------------------------------------- paths

std::string to_string(PathKind k) {
    switch (k) {
        case PathKind::hypotrochoid: return "hypotrochoid";
        case PathKind::petal: return "petal";
        case PathKind::helix: return "helix";
    }
    return "hypotrochoid";
}

PathKind path_kind_from_string(const std::string& s) {
    if (s == "hypotrochoid") return PathKind::hypotrochoid;
    if (s == "petal") return PathKind::petal;
    if (s == "helix") return PathKind::helix;
    throw std::invalid_argument("path.kind: unknown value '" + s + "'");
}

PathSpec PathSpec::defaults(PathKind kind) {
    PathSpec p;
    p.kind = kind;
    if (kind == PathKind::petal) p.omega = 0.4;
    if (kind == PathKind::helix) {
        p.center = {0.45, 0.0, 0.15};
        p.u_axis = Vector3d::UnitX();
        p.v_axis = Vector3d::UnitY();
        p.axial = Vector3d::UnitZ();
    }
    return p;
}

PathSpec PathSpec::from_json(const nlohmann::json& j) {
    PathSpec p = defaults(path_kind_from_string(j.value("kind", std::string("hypotrochoid"))));
    p.big_r = j.value("R", p.big_r);
    p.small_r = j.value("r", p.small_r);
    p.pen = j.value("d", p.pen);
    p.petal_amplitude = j.value("petal_amplitude", p.petal_amplitude);
    p.petal_k = j.value("petal_k", p.petal_k);
    p.helix_radius = j.value("helix_radius", p.helix_radius);
    p.helix_pitch = j.value("helix_pitch", p.helix_pitch);
    p.scale = j.value("scale", p.scale);
    p.omega = j.value("omega", p.omega);
    p.ramp = j.value("ramp", p.ramp);
    p.center = vec3(j.value("center", nlohmann::json()), p.center);
    p.u_axis = vec3(j.value("u_axis", nlohmann::json()), p.u_axis);
    p.v_axis = vec3(j.value("v_axis", nlohmann::json()), p.v_axis);
    p.axial = vec3(j.value("axial", nlohmann::json()), p.axial);
    if (!(p.small_r > 0.0)) throw std::invalid_argument("path.r: must be positive");
    if (p.ramp < 0.0) throw std::invalid_argument("path.ramp: must be non-negative");
    return p;
}

nlohmann::json PathSpec::to_json() const {
    return {{"kind", to_string(kind)},
            {"R", big_r},
            {"r", small_r},
            {"d", pen},
            {"petal_amplitude", petal_amplitude},
            {"petal_k", petal_k},
            {"helix_radius", helix_radius},
            {"helix_pitch", helix_pitch},
            {"scale", scale},
            {"omega", omega},
            {"ramp", ramp},
            {"center", json3(center)},
            {"u_axis", json3(u_axis)},
            {"v_axis", json3(v_axis)},
            {"axial", json3(axial)}};
}

double ease(double t, double ramp) {
    if (ramp <= 0.0) return t;
    return std::abs(t) < ramp ? t * t / (2.0 * ramp) : t - 0.5 * ramp;
}

Vector3d reference_path(const PathSpec& s, double t) {
    const double th = s.omega * ease(t, s.ramp);
    switch (s.kind) {
        case PathKind::hypotrochoid: {
            const double rr = s.big_r - s.small_r;
            const double a = rr * std::cos(th) + s.pen * std::cos(rr / s.small_r * th);
            const double b = rr * std::sin(th) - s.pen * std::sin(rr / s.small_r * th);
            return s.center + s.scale * (a * s.u_axis + b * s.v_axis);
        }
        case PathKind::petal: {
            const double rho = s.petal_amplitude * std::cos(s.petal_k * th);
            return s.center + rho * std::cos(th) * s.u_axis + rho * std::sin(th) * s.v_axis;
        }
        case PathKind::helix:
            return s.center + s.helix_radius * (std::cos(th) * s.u_axis + std::sin(th) * s.v_axis) +
                   s.helix_pitch * th * s.axial;
    }
    return s.center;
}

// ---------------------------------------------------------------- IK

double workspace_margin(const dynamics::ManipulatorModel& model, const Vector3d& point) {
    return model.reach() - point.norm();
}

VectorXd inverse_kinematics(const dynamics::ManipulatorModel& model, const Vector3d& point, const VectorXd& q_guess,
                            const IkOptions& opt) {
    if (q_guess.size() != model.dof()) throw std::invalid_argument("inverse_kinematics: q_guess size");
    if (!point.allFinite()) throw std::invalid_argument("inverse_kinematics: non-finite target");
    const double dist = point.norm();
    if (dist > model.reach() + 1e-12) {
        throw UnreachableError("inverse_kinematics: target " + io::format_double(dist) +
                                   " m from the base exceeds reach " + io::format_double(model.reach()) + " m",
                               dist - model.reach());
    }
    VectorXd q = q_guess;
    Vector3d err = point - dynamics::ee_position(model, q);
    double lambda = opt.damping;
    for (int it = 0; it < opt.max_iterations; ++it) {
        if (err.norm() < opt.tolerance) return q;
        const Eigen::MatrixXd j = dynamics::ee_jacobian(model, q);
        Eigen::Matrix3d jj = j * j.transpose();
        jj.diagonal().array() += lambda * lambda;
        VectorXd dq = j.transpose() * jj.ldlt().solve(err);
        const double norm = dq.norm();
        if (norm > opt.max_step) dq *= opt.max_step / norm;
        const VectorXd q_try = q + dq;
        const Vector3d err_try = point - dynamics::ee_position(model, q_try);
        if (err_try.norm() < err.norm()) {
            q = q_try;
            err = err_try;
            lambda = std::max(lambda * 0.5, 1e-9);
        } else {
            lambda = std::min(lambda * 4.0, 1e3);
        }
    }
    if (err.norm() < opt.tolerance) return q;
    throw IkError("inverse_kinematics: no convergence, residual " + io::format_double(err.norm()) + " m",
                  err.norm());
}

// ---------------------------------------------------------------- tracking

std::string to_string(DisturbanceCase c) {
    switch (c) {
        case DisturbanceCase::d0: return "d0";
        case DisturbanceCase::d1: return "d1";
        case DisturbanceCase::d2: return "d2";
        case DisturbanceCase::d3: return "d3";
    }
    return "d0";
}

DisturbanceCase disturbance_case_from_string(const std::string& s) {
    if (s == "d0") return DisturbanceCase::d0;
    if (s == "d1") return DisturbanceCase::d1;
    if (s == "d2") return DisturbanceCase::d2;
    if (s == "d3") return DisturbanceCase::d3;
    throw std::invalid_argument("disturbance: unknown case '" + s + "' (expected d0..d3)");
}

dynamics::DisturbanceSpec disturbance_for(DisturbanceCase c, int n) {
    switch (c) {
        case DisturbanceCase::d0: return dynamics::DisturbanceSpec::none_spec();
        case DisturbanceCase::d1: return dynamics::DisturbanceSpec::actuator_fault(-0.6);
        case DisturbanceCase::d2: return dynamics::DisturbanceSpec::constant_torque(VectorXd::Constant(n, 10.0));
        case DisturbanceCase::d3: return dynamics::DisturbanceSpec::ee_load(Vector3d(20.0, 20.0, 20.0));
    }
    return dynamics::DisturbanceSpec::none_spec();
}

dynamics::ManipulatorModel manipulator_from_config(const nlohmann::json& j) {
    if (j.contains("links")) return dynamics::ManipulatorModel::from_json(j);
    if (!j.contains("n")) throw std::invalid_argument("manipulator: needs 'links' or 'n'");
    return dynamics::ManipulatorModel::uniform_chain(j["n"].get<int>(), j.value("mass", 0.6), j.value("length", 0.33),
                                                     dynamics::topology_from_string(j.value("topology", std::string("spatial"))));
}

TrackingConfig TrackingConfig::from_json(const nlohmann::json& j, int n) {
    TrackingConfig c;
    if (j.contains("path")) {
        const auto& p = j["path"];
        c.path = p.is_string() ? PathSpec::defaults(path_kind_from_string(p.get<std::string>())) : PathSpec::from_json(p);
    }
    c.duration = j.value("duration", c.duration);
    c.plant_substeps = j.value("plant_substeps", c.plant_substeps);
    if (j.contains("q_guess")) {
        const auto v = j["q_guess"].get<std::vector<double>>();
        c.q_guess = Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
        if (c.q_guess.size() != n) throw std::invalid_argument("q_guess: expected " + std::to_string(n) + " entries");
    }
    if (j.contains("disturbance")) {
        const auto& d = j["disturbance"];
        if (d.is_string()) {
            c.disturbance_label = d.get<std::string>();
            c.disturbance = disturbance_for(disturbance_case_from_string(c.disturbance_label), n);
        } else {
            c.disturbance = dynamics::DisturbanceSpec::from_json(d);
            c.disturbance_label = dynamics::to_string(c.disturbance.kind);
        }
    }
    c.controller = mpc::MpcConfig::from_json(j.value("controller", nlohmann::json::object()));
    c.seed = j.value("seed", c.seed);
    if (!(c.duration >= 0.0)) throw std::invalid_argument("duration: must be non-negative");
    if (c.plant_substeps < 1) throw std::invalid_argument("plant_substeps: must be at least 1");
    c.controller.validate(n, n);
    return c;
}

nlohmann::json TrackingConfig::to_json() const {
    return {{"path", path.to_json()},
            {"duration", duration},
            {"plant_substeps", plant_substeps},
            {"q_guess", q_guess.size() ? json_vec(q_guess) : nlohmann::json()},
            {"disturbance", disturbance.to_json()},
            {"disturbance_label", disturbance_label},
            {"controller", controller.to_json()},
            {"seed", seed}};
}

namespace {

VectorXd default_guess(const dynamics::ManipulatorModel& model, const Vector3d& target) {
    const int n = model.dof();
    VectorXd q = VectorXd::Zero(n);
    if (model.topology() == dynamics::Topology::spatial && n >= 3) {
        // Yaw toward the target, shoulder raised, elbow bent.
        q[0] = std::atan2(target.y(), target.x());
        q[1] = -0.9;
        for (int i = 2; i < n; ++i) q[i] = 1.2 / (n - 2);
    } else {
        for (int i = 0; i < n; ++i) q[i] = i == 0 ? std::atan2(target.y(), target.x()) - 0.5 : 1.0 / (n - 1);
    }
    return q;
}

}  // namespace

JointReference joint_reference(const dynamics::ManipulatorModel& model, const PathSpec& path, double duration,
                               double dt, int extra, const VectorXd& q_guess) {
    const int steps = static_cast<int>(std::lround(duration / dt));
    const int count = steps + extra + 1;
    // Samples k = -1 .. count for central differences at both ends.
    std::vector<VectorXd> q(static_cast<std::size_t>(count + 2));
    std::vector<Vector3d> pts(static_cast<std::size_t>(count + 2));
    const Vector3d p0 = reference_path(path, 0.0);
    VectorXd guess = q_guess.size() ? q_guess : default_guess(model, p0);
    for (int k = 0; k <= count; ++k) {
        pts[static_cast<std::size_t>(k + 1)] = reference_path(path, k * dt);
        guess = inverse_kinematics(model, pts[static_cast<std::size_t>(k + 1)], guess);
        q[static_cast<std::size_t>(k + 1)] = guess;
    }
    pts[0] = reference_path(path, -dt);
    q[0] = inverse_kinematics(model, pts[0], q[1]);
    JointReference ref;
    for (int k = 0; k < count; ++k) {
        const auto i = static_cast<std::size_t>(k + 1);
        ref.q.push_back(q[i]);
        ref.qd.push_back((q[i + 1] - q[i - 1]) / (2.0 * dt));
        ref.points.push_back(pts[i]);
    }
    return ref;
}

std::string TrackingLog::to_csv() const {
    std::vector<std::string> header{"t"};
    const auto n = q.empty() ? 0 : q.front().size();
    const auto m = u.empty() ? 0 : u.front().size();
    const auto sd = d_hat.empty() ? 0 : d_hat.front().size();
    for (Eigen::Index i = 1; i <= n; ++i) header.push_back("q_ref" + std::to_string(i));
    for (Eigen::Index i = 1; i <= n; ++i) header.push_back("q" + std::to_string(i));
    for (Eigen::Index i = 1; i <= m; ++i) header.push_back("u" + std::to_string(i));
    for (Eigen::Index i = 1; i <= sd; ++i) header.push_back("d_hat" + std::to_string(i));
    header.push_back("solve_iters");
    header.push_back("kkt_residual");
    std::string text = io::csv_line(header);
    for (std::size_t k = 0; k < t.size(); ++k) {
        std::vector<std::string> row{io::format_double(t[k])};
        for (Eigen::Index i = 0; i < n; ++i) row.push_back(io::format_double(q_ref[k][i]));
        for (Eigen::Index i = 0; i < n; ++i) row.push_back(io::format_double(q[k][i]));
        for (Eigen::Index i = 0; i < m; ++i) row.push_back(io::format_double(u[k][i]));
        for (Eigen::Index i = 0; i < sd; ++i) row.push_back(io::format_double(d_hat[k][i]));
        row.push_back(std::to_string(iterations[k]));
        row.push_back(io::format_double(kkt[k]));
        text += io::csv_line(row);
    }
    return text;
}

nlohmann::json TrackingResult::to_json() const {
    return {{"task_rmse", task_rmse},
            {"joint_rmse", joint_rmse},
            {"max_task_error", max_task_error},
            {"solver_faults", solver_faults},
            {"diverged", diverged},
            {"steps", log.t.size()}};
}

TrackingResult run_tracking_experiment(const dynamics::ManipulatorModel& plant, const koopman::KoopmanModel& model,
                                       const TrackingConfig& cfg) {
    const int n = plant.dof();
    if (model.dof() != n) throw std::invalid_argument("tracking: model and plant degrees of freedom differ");
    const double dt = model.dt();
    const int s = cfg.controller.horizon;
    const int steps = static_cast<int>(std::lround(cfg.duration / dt));
    const auto ref = joint_reference(plant, cfg.path, cfg.duration, dt, s, cfg.q_guess);
    const auto conv = model.convention();
    std::vector<VectorXd> x_ref;
    x_ref.reserve(ref.q.size());
    for (std::size_t k = 0; k < ref.q.size(); ++k) {
        VectorXd e(2 * n);
        e << ref.q[k], ref.qd[k];
        x_ref.push_back(koopman::from_explicit(plant, conv, e));
    }

    mpc::KoopmanMpc controller(model, cfg.controller);
    dynamics::JointState state{ref.q[0], VectorXd::Zero(n)};
    TrackingResult res;
    double task_sq = 0.0, joint_sq = 0.0;
    int samples = 0;
    std::vector<VectorXd> window(static_cast<std::size_t>(s));
    const double h = dt / cfg.plant_substeps;
    for (int k = 0; k <= steps; ++k) {
        const double t = k * dt;
        const double e_task = (dynamics::ee_position(plant, state.q) - ref.points[static_cast<std::size_t>(k)]).norm();
        task_sq += e_task * e_task;
        joint_sq += (state.q - ref.q[static_cast<std::size_t>(k)]).squaredNorm() / n;
        res.max_task_error = std::max(res.max_task_error, e_task);
        ++samples;
        if (k == steps) break;
        VectorXd e(2 * n);
        e << state.q, state.qd;
        const VectorXd x = koopman::from_explicit(plant, conv, e);
        for (int j = 0; j < s; ++j) window[static_cast<std::size_t>(j)] = x_ref[static_cast<std::size_t>(k + 1 + j)];
        const auto step = controller.step(x, window);
        res.log.t.push_back(t);
        res.log.q_ref.push_back(ref.q[static_cast<std::size_t>(k)]);
        res.log.q.push_back(state.q);
        res.log.u.push_back(step.u);
        res.log.d_hat.push_back(step.d_hat);
        res.log.iterations.push_back(step.iterations);
        res.log.kkt.push_back(step.kkt_residual);
        try {
            for (int sub = 0; sub < cfg.plant_substeps; ++sub) {
                state = dynamics::step_joint(plant, state, step.u, cfg.disturbance, t + sub * h, h);
            }
        } catch (const dynamics::DivergenceError&) {
            res.diverged = true;
            break;
        }
    }
    res.task_rmse = std::sqrt(task_sq / samples);
    res.joint_rmse = std::sqrt(joint_sq / samples);
    res.solver_faults = controller.faults();
    return res;
}

// ---------------------------------------------------------------- prediction benchmark

PredictionBenchmarkConfig PredictionBenchmarkConfig::from_json(const nlohmann::json& j) {
    PredictionBenchmarkConfig c;
    c.chains = j.value("chains", c.chains);
    c.dataset_sizes = j.value("dataset_sizes", c.dataset_sizes);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("variants")) {
        c.variants.clear();
        for (const auto& v : j["variants"]) c.variants.push_back(koopman::variant_from_string(v.get<std::string>()));
    }
    c.snapshots = j.value("snapshots", c.snapshots);
    c.dt = j.value("dt", c.dt);
    c.test_trajectories = j.value("test_trajectories", c.test_trajectories);
    c.window = j.value("window", c.window);
    c.link_mass = j.value("link_mass", c.link_mass);
    c.link_length = j.value("link_length", c.link_length);
    c.topology = dynamics::topology_from_string(j.value("topology", std::string("planar")));
    if (j.contains("excitation")) c.excitation = training::ExcitationSpec::from_json(j["excitation"]);
    if (j.contains("train")) c.train = training::TrainConfig::from_json(j["train"]);
    c.jobs = j.value("jobs", c.jobs);
    if (c.chains.empty() || c.dataset_sizes.empty() || c.seeds.empty() || c.variants.empty()) {
        throw std::invalid_argument("benchmark: chains, dataset_sizes, seeds and variants must be non-empty");
    }
    for (int n : c.chains) {
        if (n < 1) throw std::invalid_argument("chains: entries must be positive");
    }
    for (int p : c.dataset_sizes) {
        if (p < 2) throw std::invalid_argument("dataset_sizes: entries must be at least 2");
    }
    if (c.window < 1 || c.snapshots <= c.window) throw std::invalid_argument("window: must be in [1, snapshots)");
    if (c.test_trajectories < 1) throw std::invalid_argument("test_trajectories: must be positive");
    return c;
}

nlohmann::json PredictionBenchmarkConfig::to_json() const {
    nlohmann::json vs = nlohmann::json::array();
    for (auto v : variants) vs.push_back(koopman::to_string(v));
    return {{"chains", chains},
            {"dataset_sizes", dataset_sizes},
            {"seeds", seeds},
            {"variants", vs},
            {"snapshots", snapshots},
            {"dt", dt},
            {"test_trajectories", test_trajectories},
            {"window", window},
            {"link_mass", link_mass},
            {"link_length", link_length},
            {"topology", dynamics::to_string(topology)},
            {"excitation", excitation.to_json()},
            {"train", train.to_json()},
            {"jobs", jobs}};
}

double PredictionReport::median(int chain, int trajectories, koopman::Variant v) const {
    std::vector<double> e;
    for (const auto& r : rows) {
        if (r.chain == chain && r.trajectories == trajectories && r.variant == v) e.push_back(r.error);
    }
    return median_of(e);
}

std::string PredictionReport::to_csv() const {
    std::string text = io::csv_line({"chain", "trajectories", "variant", "seed", "error", "parameters",
                                     "train_seconds", "best_epoch", "config_hash", "model_hash"});
    for (const auto& r : rows) {
        text += io::csv_line({std::to_string(r.chain), std::to_string(r.trajectories), koopman::to_string(r.variant),
                              std::to_string(r.seed), io::format_double(r.error), std::to_string(r.parameters),
                              io::format_double(r.train_seconds), std::to_string(r.best_epoch), r.config_hash,
                              r.model_hash});
    }
    return text;
}

nlohmann::json PredictionReport::summary() const {
    std::map<std::tuple<int, int, std::string>, std::vector<double>> cells;
    for (const auto& r : rows) cells[{r.chain, r.trajectories, koopman::to_string(r.variant)}].push_back(r.error);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [key, errs] : cells) {
        out.push_back({{"chain", std::get<0>(key)},
                       {"trajectories", std::get<1>(key)},
                       {"variant", std::get<2>(key)},
                       {"median_error", median_of(errs)},
                       {"errors", errs}});
    }
    return {{"config", config}, {"cells", out}};
}

double held_out_error(const koopman::KoopmanModel& model, const dynamics::ManipulatorModel& manip,
                      const training::TrajectoryDataset& test, int window) {
    if (test.convention != koopman::StateConvention::explicit_velocity || test.kind != training::DatasetKind::actuated) {
        throw std::invalid_argument("held_out_error: expects actuated explicit-coordinate test data");
    }
    const auto conv = model.convention();
    std::vector<VectorXd> pred, truth;
    for (const auto& t : test.trajectories) {
        for (int start = 0; start + window < t.snapshots(); start += window) {
            const VectorXd x0 = koopman::from_explicit(manip, conv, t.states.col(start));
            std::vector<VectorXd> inputs;
            inputs.reserve(static_cast<std::size_t>(window));
            for (int k = 0; k < window; ++k) inputs.emplace_back(t.inputs.col(start + k));
            const auto roll = koopman::rollout(model, x0, inputs);
            if (roll.diverged_at) return std::numeric_limits<double>::infinity();
            for (int k = 1; k <= window; ++k) {
                pred.push_back(koopman::to_explicit(manip, conv, roll.states[static_cast<std::size_t>(k)]));
                truth.emplace_back(t.states.col(start + k));
            }
        }
    }
    const double e = koopman::standardized_error(pred, truth).value;
    return std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
}

PredictionReport run_prediction_benchmark(const PredictionBenchmarkConfig& cfg, const ProgressFn& progress) {
    PredictionReport report;
    report.config = cfg.to_json();
    const int max_p = *std::max_element(cfg.dataset_sizes.begin(), cfg.dataset_sizes.end());

    struct Source {
        int chain;
        std::uint64_t seed;
        dynamics::ManipulatorModel manip;
        training::TrajectoryDataset train_explicit;
        training::TrajectoryDataset train_momentum;
        training::TrajectoryDataset test;
    };
    std::vector<Source> sources;
    for (int n : cfg.chains) {
        const auto manip = dynamics::ManipulatorModel::uniform_chain(n, cfg.link_mass, cfg.link_length, cfg.topology);
        for (auto seed : cfg.seeds) {
            const auto data_seed = io::derive_seed(seed, static_cast<std::uint64_t>(100 + n));
            auto train = training::generate_dataset(manip, training::DatasetKind::actuated, max_p, cfg.snapshots,
                                                    cfg.dt, cfg.excitation, data_seed,
                                                    koopman::StateConvention::explicit_velocity);
            auto test = training::generate_dataset(manip, training::DatasetKind::actuated, cfg.test_trajectories,
                                                   cfg.snapshots, cfg.dt, cfg.excitation,
                                                   io::derive_seed(data_seed, 0x7e57),
                                                   koopman::StateConvention::explicit_velocity);
            auto momentum = training::convert_dataset(train, manip, koopman::StateConvention::momentum);
            sources.push_back({n, seed, manip, std::move(train), std::move(momentum), std::move(test)});
            if (progress) progress("generated data for chain " + std::to_string(n) + " seed " + std::to_string(seed));
        }
    }

    struct Cell {
        std::size_t source;
        int p;
        koopman::Variant variant;
    };
    std::vector<Cell> cells;
    for (std::size_t s = 0; s < sources.size(); ++s) {
        for (int p : cfg.dataset_sizes) {
            for (auto v : cfg.variants) cells.push_back({s, p, v});
        }
    }
    report.rows.resize(cells.size());
    std::mutex progress_mutex;
    run_jobs(cells.size(), cfg.jobs, [&](std::size_t i) {
        const auto& cell = cells[i];
        const auto& src = sources[cell.source];
        const auto& full = cell.variant == koopman::Variant::proposed ? src.train_momentum : src.train_explicit;
        training::TrajectoryDataset ds = full;
        ds.trajectories.resize(static_cast<std::size_t>(cell.p));
        training::TrainConfig tc = cfg.train;
        // Identical training seed for every variant within a cell.
        tc.seed = io::derive_seed(src.seed, static_cast<std::uint64_t>(cell.p));
        const auto t0 = std::chrono::steady_clock::now();
        training::TrainReport tr;
        const auto model = training::train(ds, tc, cell.variant, &tr);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        PredictionRow row;
        row.chain = src.chain;
        row.trajectories = cell.p;
        row.variant = cell.variant;
        row.seed = src.seed;
        row.error = held_out_error(model, src.manip, src.test, cfg.window);
        row.parameters = koopman::count_learnable_params(model);
        row.train_seconds = secs;
        row.best_epoch = tr.best_epoch;
        row.config_hash = io::json_hash({{"benchmark", report.config},
                                         {"chain", row.chain},
                                         {"trajectories", row.trajectories},
                                         {"variant", koopman::to_string(row.variant)},
                                         {"seed", row.seed}});
        row.model_hash = io::json_hash(model.to_json());
        report.rows[i] = row;
        if (progress) {
            std::lock_guard lock(progress_mutex);
            progress("chain " + std::to_string(row.chain) + " p=" + std::to_string(row.trajectories) + " " +
                     koopman::to_string(row.variant) + " seed " + std::to_string(row.seed) +
                     ": error " + io::format_double(row.error) + " (" + io::format_double(secs) + " s)");
        }
    });
    return report;
}

// ---------------------------------------------------------------- reports

std::string tracking_rows_csv(const std::vector<TrackingRow>& rows) {
    std::string text = io::csv_line(
        {"path", "disturbance", "variant", "geso", "seed", "task_rmse_m", "joint_rmse_rad", "config_hash", "model_hash"});
    for (const auto& r : rows) {
        text += io::csv_line({r.path, r.disturbance, r.variant, r.geso ? "on" : "off", std::to_string(r.seed),
                              io::format_double(r.task_rmse), io::format_double(r.joint_rmse), r.config_hash,
                              r.model_hash});
    }
    return text;
}

namespace {

// Column lookup for the report parsers.
std::vector<std::size_t> columns(const io::CsvTable& table, const std::vector<std::string>& names) {
    std::vector<std::size_t> idx;
    for (const auto& name : names) {
        const auto it = std::find(table.header.begin(), table.header.end(), name);
        if (it == table.header.end()) throw std::invalid_argument("report: missing column '" + name + "'");
        idx.push_back(static_cast<std::size_t>(it - table.header.begin()));
    }
    return idx;
}

}  // namespace

std::vector<TrackingRow> tracking_rows_from_csv(const io::CsvTable& table) {
    const auto c = columns(table, {"path", "disturbance", "variant", "geso", "seed", "task_rmse_m", "joint_rmse_rad",
                                   "config_hash", "model_hash"});
    std::vector<TrackingRow> rows;
    for (const auto& f : table.rows) {
        TrackingRow r;
        r.path = f.at(c[0]);
        r.disturbance = f.at(c[1]);
        r.variant = f.at(c[2]);
        r.geso = f.at(c[3]) == "on";
        r.seed = std::stoull(f.at(c[4]));
        r.task_rmse = std::stod(f.at(c[5]));
        r.joint_rmse = std::stod(f.at(c[6]));
        r.config_hash = f.at(c[7]);
        r.model_hash = f.at(c[8]);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<PredictionRow> prediction_rows_from_csv(const io::CsvTable& table) {
    const auto c = columns(table, {"chain", "trajectories", "variant", "seed", "error", "parameters", "train_seconds",
                                   "best_epoch", "config_hash", "model_hash"});
    std::vector<PredictionRow> rows;
    for (const auto& f : table.rows) {
        PredictionRow r;
        r.chain = std::stoi(f.at(c[0]));
        r.trajectories = std::stoi(f.at(c[1]));
        r.variant = koopman::variant_from_string(f.at(c[2]));
        r.seed = std::stoull(f.at(c[3]));
        r.error = std::stod(f.at(c[4]));
        r.parameters = std::stoull(f.at(c[5]));
        r.train_seconds = std::stod(f.at(c[6]));
        r.best_epoch = std::stoi(f.at(c[7]));
        r.config_hash = f.at(c[8]);
        r.model_hash = f.at(c[9]);
        rows.push_back(std::move(r));
    }
    return rows;
}

namespace {

constexpr const char* kPredictionPlot = R"py(import sys
import pandas as pd
import matplotlib.pyplot as plt

df = pd.read_csv(sys.argv[1] if len(sys.argv) > 1 else "report.csv")
med = df.groupby(["chain", "trajectories", "variant"])["error"].median().reset_index()
chains = sorted(med["chain"].unique())
fig, axes = plt.subplots(1, len(chains), figsize=(4 * len(chains), 3.5), squeeze=False)
for ax, chain in zip(axes[0], chains):
    sub = med[med["chain"] == chain]
    for variant, g in sub.groupby("variant"):
        ax.plot(g["trajectories"], g["error"], marker="o", label=variant)
    ax.set_title(f"{chain}R chain")
    ax.set_xlabel("training trajectories")
    ax.set_ylabel("standardized rollout error")
    ax.legend()
fig.tight_layout()
fig.savefig("prediction.png", dpi=150)
)py";

constexpr const char* kTrackingPlot = R"py(import sys
import pandas as pd
import matplotlib.pyplot as plt

df = pd.read_csv(sys.argv[1] if len(sys.argv) > 1 else "report.csv")
df["label"] = df["variant"] + " geso " + df["geso"]
pivot = df.pivot_table(index=["path", "disturbance"], columns="label", values="task_rmse_m", aggfunc="median")
ax = pivot.plot.bar(logy=True, figsize=(8, 4))
ax.set_ylabel("task-space RMSE (m)")
plt.tight_layout()
plt.savefig("tracking.png", dpi=150)
)py";

}  // namespace

void write_prediction_report(const PredictionReport& report, const std::filesystem::path& dir) {
    io::write_text(dir / "report.csv", report.to_csv());
    io::write_json(dir / "summary.json", report.summary());
    io::write_text(dir / "plot.py", kPredictionPlot);
}

void write_tracking_report(const std::vector<TrackingRow>& rows, const std::filesystem::path& dir) {
    io::write_text(dir / "report.csv", tracking_rows_csv(rows));
    nlohmann::json summary = nlohmann::json::array();
    for (const auto& r : rows) {
        summary.push_back({{"path", r.path},
                           {"disturbance", r.disturbance},
                           {"variant", r.variant},
                           {"geso", r.geso},
                           {"seed", r.seed},
                           {"task_rmse_m", r.task_rmse},
                           {"joint_rmse_rad", r.joint_rmse},
                           {"config_hash", r.config_hash},
                           {"model_hash", r.model_hash}});
    }
    io::write_json(dir / "summary.json", {{"rows", summary}});
    io::write_text(dir / "plot.py", kTrackingPlot);
}

void run_jobs(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
    const auto workers = static_cast<std::size_t>(std::max(1, jobs));
    if (workers == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, count); ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                {
                    std::lock_guard lock(failure_mutex);
                    if (failure) return;
                }
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace mkoop::harness
