// mkoop: command-line front end for data generation, training, prediction
// benchmarks, closed-loop tracking and report merging.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
// Environment: MKOOP_OUT_DIR (default output directory), MKOOP_JOBS (default --jobs).

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mkoop/harness.hpp"
#include "mkoop/io.hpp"
#include "mkoop/koopman.hpp"
#include "mkoop/simd/kernels.hpp"
#include "mkoop/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mkoop;

namespace {

constexpr const char* kVersion = "1.0.0";

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

int default_jobs() {
    const std::string v = env_or("MKOOP_JOBS", "1");
    try {
        return std::max(1, std::stoi(v));
    } catch (const std::exception&) {
        throw UsageError("MKOOP_JOBS: not an integer: " + v);
    }
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    if (!fs::exists(path)) throw UsageError("config file not found: " + path);
    try {
        return io::read_json(path);
    } catch (const std::exception& e) {
        throw UsageError("config " + path + ": " + e.what());
    }
}

// Runs `fn` and reports any failure as a configuration error.
template <class Fn>
auto validated(const std::string& what, Fn&& fn) {
    try {
        return fn();
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& e) {
        throw UsageError(what + ": " + e.what());
    }
}

json manifest(const std::string& command, const std::vector<std::string>& argv, const json& config,
              std::uint64_t seed) {
    return {{"tool", "mkoop"},
            {"version", kVersion},
            {"command", command},
            {"argv", argv},
            {"seed", seed},
            {"simd", std::string(simd::isa_name(simd::kernels().isa))},
            {"config", config},
            {"config_hash", io::json_hash(config)}};
}

// Directory outputs carry run_manifest.json; file outputs carry <stem>.manifest.json.
void write_manifest_dir(const fs::path& dir, const json& m) { io::write_json(dir / "run_manifest.json", m); }
void write_manifest_file(const fs::path& file, const json& m) {
    io::write_json(file.parent_path() / (file.stem().string() + ".manifest.json"), m);
}

training::TrajectoryDataset in_convention(const training::TrajectoryDataset& ds, koopman::StateConvention c) {
    if (ds.convention == c) return ds;
    return training::convert_dataset(ds, dynamics::ManipulatorModel::from_json(ds.manipulator), c);
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
    std::optional<int> trajectories;
};

void gen_data(const GenDataArgs& a, const std::vector<std::string>& argv) {
    json cfg = load_config(a.config);
    if (a.seed) cfg["seed"] = *a.seed;
    if (a.trajectories) cfg["trajectories"] = *a.trajectories;
    struct Plan {
        dynamics::ManipulatorModel manip;
        training::DatasetKind kind;
        int p, w;
        double dt;
        training::ExcitationSpec ex;
        std::uint64_t seed;
        koopman::StateConvention conv;
    };
    const Plan plan = validated("gen-data config", [&] {
        if (!cfg.contains("manipulator")) throw std::invalid_argument("manipulator: missing");
        Plan p{harness::manipulator_from_config(cfg["manipulator"]),
               training::dataset_kind_from_string(cfg.value("kind", std::string("actuated"))),
               cfg.value("trajectories", 100),
               cfg.value("snapshots", 1000),
               cfg.value("dt", 0.01),
               training::ExcitationSpec::from_json(cfg.value("excitation", json::object())),
               cfg.value("seed", std::uint64_t{0}),
               koopman::convention_from_string(cfg.value("convention", std::string("momentum")))};
        if (p.p < 2) throw std::invalid_argument("trajectories: must be at least 2");
        if (p.w < 2) throw std::invalid_argument("snapshots: must be at least 2");
        if (!(p.dt > 0.0)) throw std::invalid_argument("dt: must be positive");
        return p;
    });
    const fs::path out = a.out.empty() ? fs::path(env_or("MKOOP_OUT_DIR", ".")) / "dataset" : fs::path(a.out);
    const auto ds = training::generate_dataset(plan.manip, plan.kind, plan.p, plan.w, plan.dt, plan.ex, plan.seed,
                                               plan.conv);
    training::save_dataset(ds, out);
    write_manifest_dir(out, manifest("gen-data", argv, cfg, plan.seed));
    std::cout << "wrote " << ds.trajectories.size() << " trajectories to " << out.string() << "\n";
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string config, dataset, variant, out;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    bool quiet = false;
};

void train_cmd(const TrainArgs& a, const std::vector<std::string>& argv) {
    json cfg = load_config(a.config);
    if (a.seed) cfg["seed"] = *a.seed;
    if (a.epochs) cfg["epochs"] = *a.epochs;
    const auto tc = validated("train config", [&] {
        auto c = training::TrainConfig::from_json(cfg);
        c.validate();
        return c;
    });
    const auto variant = validated("--variant", [&] { return koopman::variant_from_string(a.variant); });
    if (!fs::is_directory(a.dataset)) throw UsageError("dataset directory not found: " + a.dataset);
    const auto ds = in_convention(training::load_dataset(a.dataset), koopman::natural_convention(variant));
    training::TrainReport rep;
    auto model = training::train(ds, tc, variant, &rep, [&](int e, double tl, double vl) {
        if (!a.quiet) std::cerr << "epoch " << e << " train " << io::format_double(tl) << " val "
                                << io::format_double(vl) << "\n";
    });
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::write_json(out, model.to_json());
    json resolved = tc.to_json();
    resolved["variant"] = koopman::to_string(variant);
    resolved["dataset"] = fs::absolute(a.dataset).string();
    write_manifest_file(out, manifest("train", argv, resolved, tc.seed));
    std::cout << "wrote " << out.string() << " (best epoch " << rep.best_epoch << ", "
              << koopman::count_learnable_params(model) << " learnable parameters)\n";
}

// ---------------------------------------------------------------- eval-pred

struct EvalArgs {
    std::string config, out, model, dataset;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    int window = 100;
};

void eval_pred(const EvalArgs& a, const std::vector<std::string>& argv) {
    const fs::path out = a.out.empty() ? fs::path(env_or("MKOOP_OUT_DIR", ".")) / "prediction" : fs::path(a.out);
    if (!a.model.empty()) {
        // Single-model evaluation on a held-out dataset.
        if (a.dataset.empty()) throw UsageError("--model needs --dataset");
        if (a.window < 1) throw UsageError("--window: must be positive");
        const auto model = validated("model", [&] { return koopman::KoopmanModel::from_json(io::read_json(a.model)); });
        const auto test = training::load_dataset(a.dataset);
        if (test.kind != training::DatasetKind::actuated) throw UsageError("dataset: needs actuated trajectories");
        const auto manip = dynamics::ManipulatorModel::from_json(test.manipulator);
        const auto expl = in_convention(test, koopman::StateConvention::explicit_velocity);
        const double err = harness::held_out_error(model, manip, expl, a.window);
        const json result = {{"model", a.model},
                             {"dataset", a.dataset},
                             {"window", a.window},
                             {"variant", koopman::to_string(model.variant())},
                             {"error", err},
                             {"model_hash", io::json_hash(model.to_json())}};
        fs::create_directories(out);
        io::write_json(out / "eval.json", result);
        write_manifest_dir(out, manifest("eval-pred", argv, result, 0));
        std::cout << "error " << io::format_double(err) << "\n";
        return;
    }
    json cfg = load_config(a.config);
    if (a.seed) cfg["seeds"] = json::array({*a.seed});
    cfg["jobs"] = a.jobs ? *a.jobs : cfg.value("jobs", default_jobs());
    const auto bc = validated("benchmark config", [&] {
        auto c = harness::PredictionBenchmarkConfig::from_json(cfg);
        c.train.validate();
        return c;
    });
    const auto report =
        harness::run_prediction_benchmark(bc, [](const std::string& msg) { std::cerr << msg << "\n"; });
    fs::create_directories(out);
    harness::write_prediction_report(report, out);
    write_manifest_dir(out, manifest("eval-pred", argv, bc.to_json(), bc.seeds.front()));
    std::cout << report.summary()["cells"].dump(2) << "\n";
}

// ---------------------------------------------------------------- track

struct TrackArgs {
    std::string config, model, path, geso = "on", out;
    std::vector<std::string> disturbances;
    std::optional<double> duration;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
};

void track(const TrackArgs& a, const std::vector<std::string>& argv) {
    json cfg = load_config(a.config);
    if (!fs::exists(a.model)) throw UsageError("model file not found: " + a.model);
    const auto model = validated("model", [&] { return koopman::KoopmanModel::from_json(io::read_json(a.model)); });
    const json manip_json = cfg.contains("manipulator") ? cfg["manipulator"]
                                                        : model.metadata().value("manipulator", json());
    if (manip_json.is_null()) throw UsageError("manipulator: not in config and not recorded in the model");
    const auto plant = validated("manipulator", [&] { return harness::manipulator_from_config(manip_json); });
    if (plant.dof() != model.dof()) throw UsageError("manipulator: dof does not match the model");
    if (!a.path.empty()) cfg["path"] = a.path;
    if (a.duration) cfg["duration"] = *a.duration;
    if (a.seed) cfg["seed"] = *a.seed;
    std::vector<std::string> dists = a.disturbances;
    if (dists.empty()) dists.push_back(cfg.contains("disturbance") && cfg["disturbance"].is_string()
                                           ? cfg["disturbance"].get<std::string>()
                                           : "d0");
    std::vector<bool> geso_modes;
    if (a.geso == "on" || a.geso == "both") geso_modes.push_back(true);
    if (a.geso == "off" || a.geso == "both") geso_modes.push_back(false);
    if (geso_modes.empty()) throw UsageError("--geso: expected on, off or both");

    struct Job {
        harness::TrackingConfig cfg;
        json resolved;
    };
    std::vector<Job> jobs;
    for (const auto& d : dists) {
        for (bool g : geso_modes) {
            json jc = cfg;
            jc["disturbance"] = d;
            jc["controller"] = cfg.value("controller", json::object());
            jc["controller"]["geso"] = g;
            auto tc = validated("track config", [&] { return harness::TrackingConfig::from_json(jc, plant.dof()); });
            jobs.push_back({tc, tc.to_json()});
        }
    }
    const fs::path out = a.out.empty() ? fs::path(env_or("MKOOP_OUT_DIR", ".")) / "tracking" : fs::path(a.out);
    fs::create_directories(out);
    const std::string model_hash = io::json_hash(model.to_json());
    std::vector<harness::TrackingRow> rows(jobs.size());
    harness::run_jobs(jobs.size(), a.jobs ? *a.jobs : default_jobs(), [&](std::size_t i) {
        const auto& job = jobs[i];
        const auto res = harness::run_tracking_experiment(plant, model, job.cfg);
        auto& r = rows[i];
        r.path = harness::to_string(job.cfg.path.kind);
        r.disturbance = job.cfg.disturbance_label;
        r.variant = koopman::to_string(model.variant());
        r.geso = job.cfg.controller.geso;
        r.seed = job.cfg.seed;
        r.task_rmse = res.task_rmse;
        r.joint_rmse = res.joint_rmse;
        r.config_hash = io::json_hash(job.resolved);
        r.model_hash = model_hash;
        io::write_text(out / ("log_" + r.path + "_" + r.disturbance + "_geso-" + (r.geso ? "on" : "off") + ".csv"),
                       res.log.to_csv());
    });
    harness::write_tracking_report(rows, out);
    json resolved = json::array();
    for (const auto& j : jobs) resolved.push_back(j.resolved);
    write_manifest_dir(out, manifest("track", argv, {{"runs", resolved}, {"model", a.model}}, jobs.front().cfg.seed));
    std::cout << harness::tracking_rows_csv(rows);
}

// ---------------------------------------------------------------- report

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

void report(const ReportArgs& a, const std::vector<std::string>& argv) {
    std::vector<harness::TrackingRow> tracking;
    harness::PredictionReport prediction;
    json configs = json::array();
    for (const auto& in : a.inputs) {
        const fs::path csv = fs::is_directory(in) ? fs::path(in) / "report.csv" : fs::path(in);
        if (!fs::exists(csv)) throw UsageError("report input not found: " + csv.string());
        const auto table = io::read_csv(csv);
        const bool is_tracking =
            std::find(table.header.begin(), table.header.end(), "task_rmse_m") != table.header.end();
        const auto parse = [&]<class F>(F&& f) { return validated(csv.string(), f); };
        if (is_tracking) {
            const auto r = parse([&] { return harness::tracking_rows_from_csv(table); });
            tracking.insert(tracking.end(), r.begin(), r.end());
        } else {
            const auto r = parse([&] { return harness::prediction_rows_from_csv(table); });
            prediction.rows.insert(prediction.rows.end(), r.begin(), r.end());
            const fs::path summary = csv.parent_path() / "summary.json";
            if (fs::exists(summary)) configs.push_back(io::read_json(summary).value("config", json()));
        }
    }
    if (!tracking.empty() && !prediction.rows.empty()) throw UsageError("report: cannot mix tracking and prediction reports");
    const fs::path out = a.out.empty() ? fs::path(env_or("MKOOP_OUT_DIR", ".")) / "report" : fs::path(a.out);
    fs::create_directories(out);
    if (!tracking.empty()) {
        harness::write_tracking_report(tracking, out);
    } else {
        prediction.config = configs.size() == 1 ? configs.front() : json(configs);
        harness::write_prediction_report(prediction, out);
    }
    write_manifest_dir(out, manifest("report", argv, {{"inputs", a.inputs}}, 0));
    std::cout << "merged " << (tracking.empty() ? prediction.rows.size() : tracking.size()) << " rows into "
              << out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Momentum-based Koopman models with MPC and disturbance observers"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Simulate a trajectory dataset");
    gen->add_option("--config", gd.config, "Dataset config JSON")->required();
    gen->add_option("--seed", gd.seed, "Master seed");
    gen->add_option("--trajectories", gd.trajectories, "Override the trajectory count");
    gen->add_option("--out", gd.out, "Output directory (default $MKOOP_OUT_DIR/dataset)");

    TrainArgs tr;
    auto* trn = app.add_subcommand("train", "Train a Koopman model");
    trn->add_option("--dataset", tr.dataset, "Dataset directory")->required();
    trn->add_option("--variant", tr.variant, "proposed | nlk | nbk")->required();
    trn->add_option("--out", tr.out, "Model JSON path")->required();
    trn->add_option("--config", tr.config, "Training config JSON");
    trn->add_option("--seed", tr.seed, "Training seed");
    trn->add_option("--epochs", tr.epochs, "Override the epoch count");
    trn->add_flag("--quiet", tr.quiet, "Suppress per-epoch progress");

    EvalArgs ev;
    auto* evp = app.add_subcommand("eval-pred", "Open-loop prediction benchmark or single-model evaluation");
    evp->add_option("--config", ev.config, "Benchmark config JSON");
    evp->add_option("--model", ev.model, "Evaluate one model instead of running the benchmark");
    evp->add_option("--dataset", ev.dataset, "Held-out dataset for --model");
    evp->add_option("--window", ev.window, "Rollout window in steps");
    evp->add_option("--seed", ev.seed, "Run the benchmark for this seed only");
    evp->add_option("--jobs", ev.jobs, "Parallel cells (default $MKOOP_JOBS or 1)");
    evp->add_option("--out", ev.out, "Output directory (default $MKOOP_OUT_DIR/prediction)");

    TrackArgs tk;
    auto* trk = app.add_subcommand("track", "Closed-loop tracking with MPC and GESO");
    trk->add_option("--model", tk.model, "Model JSON")->required();
    trk->add_option("--config", tk.config, "Tracking config JSON");
    trk->add_option("--path", tk.path, "hypotrochoid | petal | helix");
    trk->add_option("--disturbance", tk.disturbances, "d0 | d1 | d2 | d3 (repeatable)");
    trk->add_option("--geso", tk.geso, "on | off | both");
    trk->add_option("--duration", tk.duration, "Run length in seconds");
    trk->add_option("--seed", tk.seed, "Seed recorded with the run");
    trk->add_option("--jobs", tk.jobs, "Parallel runs (default $MKOOP_JOBS or 1)");
    trk->add_option("--out", tk.out, "Output directory (default $MKOOP_OUT_DIR/tracking)");

    ReportArgs rp;
    auto* rep = app.add_subcommand("report", "Merge report.csv files into one report");
    rep->add_option("--input", rp.inputs, "Report directory or CSV (repeatable)")->required();
    rep->add_option("--out", rp.out, "Output directory (default $MKOOP_OUT_DIR/report)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) gen_data(gd, args);
        if (*trn) train_cmd(tr, args);
        if (*evp) eval_pred(ev, args);
        if (*trk) track(tk, args);
        if (*rep) report(rp, args);
    } catch (const UsageError& e) {
        std::cerr << "mkoop: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "mkoop: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
