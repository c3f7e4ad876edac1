// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [--only 3,4,7] [--quiet]

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mkoop/dynamics.hpp"
#include "mkoop/geso.hpp"
#include "mkoop/harness.hpp"
#include "mkoop/koopman.hpp"
#include "mkoop/mpc.hpp"
#include "mkoop/qp.hpp"
#include "mkoop/training.hpp"

using namespace mkoop;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

bool g_quiet = false;

void note(const std::string& s) {
    if (!g_quiet) std::fprintf(stderr, "  %s\n", s.c_str());
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

VectorXd random_vector(int n, std::mt19937_64& rng, double r) {
    std::uniform_real_distribution<double> d(-r, r);
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = d(rng);
    return v;
}

// ---------------------------------------------------------------- prediction benchmark (1, 2)

harness::PredictionBenchmarkConfig benchmark_config() {
    return harness::PredictionBenchmarkConfig::from_json(
        {{"chains", {2, 3}},
         {"dataset_sizes", {100, 250}},
         {"seeds", {0, 1, 2}},
         {"excitation", {{"amplitude", 2.0}, {"damping", 1.0}}},
         {"train",
          {{"epochs", 20},
           {"horizon", 30},
           {"samples_per_epoch", 4000},
           {"encoder", {{"hidden", {32, 32}}, {"features", 16}}}}}});
}

const harness::PredictionReport& benchmark() {
    static const harness::PredictionReport report = [] {
        const auto t0 = std::chrono::steady_clock::now();
        auto r = harness::run_prediction_benchmark(benchmark_config(), [](const std::string& s) { note(s); });
        note("benchmark took " + fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) +
             " s");
        return r;
    }();
    return report;
}

Verdict criterion1() {
    const auto& r = benchmark();
    Verdict v{true, ""};
    for (int n : {2, 3}) {
        const double p = r.median(n, 100, koopman::Variant::proposed);
        const double a = r.median(n, 100, koopman::Variant::nlk);
        const double b = r.median(n, 100, koopman::Variant::nbk);
        v.pass = v.pass && p < a && p < b;
        v.detail += std::to_string(n) + "R proposed " + fmt(p) + " nlk " + fmt(a) + " nbk " + fmt(b) + "; ";
    }
    return v;
}

Verdict criterion2() {
    const auto& r = benchmark();
    Verdict v{true, ""};
    for (int n : {2, 3}) {
        const double p100 = r.median(n, 100, koopman::Variant::proposed);
        const double p250 = r.median(n, 250, koopman::Variant::proposed);
        const double b100 = r.median(n, 100, koopman::Variant::nbk);
        const double b250 = r.median(n, 250, koopman::Variant::nbk);
        const bool own = p100 <= 1.2 * p250;
        const bool nbk = b100 >= 1.5 * b250;
        v.pass = v.pass && own && nbk;
        v.detail += std::to_string(n) + "R proposed 100/250 " + fmt(p100 / p250) + (own ? " ok" : " high") +
                    ", nbk 100/250 " + fmt(b100 / b250) + (nbk ? " ok" : " below 1.5") + "; ";
    }
    return v;
}

// ---------------------------------------------------------------- parameter ledger (3)

Verdict criterion3() {
    lifting::EncoderSpec spec;
    spec.hidden = {128, 128, 128};
    spec.features = 64;
    auto count = [&](koopman::Variant v) {
        return static_cast<long>(koopman::count_learnable_params(
            koopman::KoopmanModel(v, 3, 3, 0.01, lifting::EncoderNetwork(6, spec, 0))));
    };
    const long p = count(koopman::Variant::proposed);
    const long a = count(koopman::Variant::nlk) - p;
    const long b = count(koopman::Variant::nbk) - p;
    return {a == 210 && b == 630, "nlk - proposed = " + std::to_string(a) + ", nbk - proposed = " + std::to_string(b)};
}

// ---------------------------------------------------------------- GESO (4)

Verdict criterion4() {
    const double d = 1.0, k1 = 40.0, k2 = 800.0;
    // Step response of x' = u + d with u = 0 known exactly, at the 100 Hz control period.
    const double dt = 0.01;
    auto obs = geso::GesoState::initial(VectorXd::Zero(1), k1, k2);
    double x = 0.0;
    for (int k = 0; k < 50; ++k) {
        obs = geso::geso_update(obs, VectorXd::Constant(1, x), VectorXd::Zero(1), dt);
        x += d * dt;
    }
    const double rel = std::abs(obs.d_hat[0] - d) / d;

    // Decay rate of the discrete error map.
    Eigen::Matrix2d map;
    for (int c = 0; c < 2; ++c) {
        geso::GesoState s{VectorXd::Constant(1, c == 0 ? 1.0 : 0.0), VectorXd::Constant(1, c == 1 ? 1.0 : 0.0), k1, k2};
        const auto next = geso::geso_update(s, VectorXd::Zero(1), VectorXd::Zero(1), dt);
        map(0, c) = next.x_hat[0];
        map(1, c) = next.d_hat[0];
    }
    const std::complex<double> lambda = map.eigenvalues()[0];
    const double rate = std::log(std::abs(lambda)) / dt;
    const bool pass = rel < 0.01 && std::abs(rate + 20.0) / 20.0 < 0.1;
    return {pass, "|dhat - d|/|d| at 0.5 s = " + fmt(rel) + ", decay rate " + fmt(rate) + " (pole -20)"};
}

// ---------------------------------------------------------------- tracking (5, 6, 9)

dynamics::ManipulatorModel chain3() {
    return dynamics::ManipulatorModel::uniform_chain(3, 0.6, 0.33, dynamics::Topology::spatial);
}

const koopman::KoopmanModel& tracking_model() {
    static const koopman::KoopmanModel model = [] {
        const auto t0 = std::chrono::steady_clock::now();
        const auto manip = chain3();
        const auto ex = training::ExcitationSpec::from_json(
            {{"amplitude", 3.0}, {"gravity_compensation", true}, {"input_bound", 30.0}, {"damping", 0.5}});
        const auto ds = training::generate_dataset(manip, training::DatasetKind::actuated, 100, 1000, 0.01, ex, 7);
        const auto tc = training::TrainConfig::from_json(
            {{"epochs", 15}, {"samples_per_epoch", 20000}, {"encoder", {{"hidden", {64, 64}}, {"features", 32}}}});
        auto m = training::train(ds, tc, koopman::Variant::proposed);
        note("3R tracking model trained in " +
             fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
        return m;
    }();
    return model;
}

harness::TrackingResult track(const dynamics::ManipulatorModel& plant, const koopman::KoopmanModel& model,
                              const std::string& dist, bool geso, json extra = json::object()) {
    json j = {{"path", "hypotrochoid"}, {"disturbance", dist}, {"duration", 20.0}};
    j.update(extra);
    if (!j.contains("controller")) j["controller"] = json::object();
    j["controller"]["geso"] = geso;
    const auto cfg = harness::TrackingConfig::from_json(j, plant.dof());
    const auto r = harness::run_tracking_experiment(plant, model, cfg);
    note(dist + (geso ? " geso on " : " geso off ") + "rmse " + fmt(r.task_rmse) + (r.diverged ? " (diverged)" : ""));
    return r;
}

Verdict criterion5() {
    const auto r = track(chain3(), tracking_model(), "d0", true);
    return {!r.diverged && r.task_rmse <= 0.01, "hypotrochoid d0 RMSE " + fmt(r.task_rmse) + " m (limit 0.01)"};
}

Verdict criterion6() {
    const auto plant = chain3();
    const auto& model = tracking_model();
    const auto d1 = track(plant, model, "d1", true);
    const auto d2 = track(plant, model, "d2", true);
    const auto d2_off = track(plant, model, "d2", false);
    const auto d3 = track(plant, model, "d3", true);
    const double ratio = d2_off.task_rmse / d2.task_rmse;
    const bool pass = !d1.diverged && !d2.diverged && !d3.diverged && d1.task_rmse <= 0.02 && d2.task_rmse <= 0.02 &&
                      d3.task_rmse <= 0.02 && ratio >= 50.0;
    return {pass, "d1 " + fmt(d1.task_rmse) + ", d2 " + fmt(d2.task_rmse) + " (GESO off " + fmt(d2_off.task_rmse) +
                      ", ratio " + fmt(ratio) + "), d3 " + fmt(d3.task_rmse) + " m"};
}

Verdict criterion9() {
    // Static reference: zero path speed at the hypotrochoid start point.
    const auto plant = chain3();
    const auto r = track(plant, tracking_model(), "d0", true, {{"path", {{"kind", "hypotrochoid"}, {"omega", 0.0}}},
                                                                 {"duration", 10.0}});
    const VectorXd q_ref = r.log.q_ref.back();
    const VectorXd g = dynamics::dynamics_terms(plant, q_ref, VectorXd::Zero(3)).gravity;
    const double rel = (r.log.u.back() - g).norm() / g.norm();
    return {!r.diverged && rel < 0.02, "|u - G(q_ref)| / |G(q_ref)| = " + fmt(rel) + " after 10 s"};
}

// ---------------------------------------------------------------- simulator physics (7)

Verdict criterion7() {
    std::mt19937_64 rng(2024);
    const auto c3 = chain3();
    const auto c7 = dynamics::ManipulatorModel::uniform_chain(7, 0.6, 0.15, dynamics::Topology::spatial);
    int spd_fail = 0;
    for (int i = 0; i < 10000; ++i) {
        const auto& m = i % 2 == 0 ? c3 : c7;
        const MatrixXd mm = dynamics::mass_matrix(m, random_vector(m.dof(), rng, kPi));
        if ((mm - mm.transpose()).norm() > 1e-12 * mm.norm() || Eigen::LLT<MatrixXd>(mm).info() != Eigen::Success) {
            ++spd_fail;
        }
    }
    double skew = 0.0, round_trip = 0.0, jac = 0.0;
    for (int i = 0; i < 200; ++i) {
        const auto& m = i % 2 == 0 ? c3 : c7;
        const int n = m.dof();
        const VectorXd q = random_vector(n, rng, kPi), qd = random_vector(n, rng, 2.0);
        const double h = 1e-6;
        const MatrixXd mdot = (dynamics::mass_matrix(m, q + h * qd) - dynamics::mass_matrix(m, q - h * qd)) / (2 * h);
        skew = std::max(skew, std::abs(qd.dot(mdot * qd) - 2.0 * qd.dot(dynamics::dynamics_terms(m, q, qd).coriolis)));
        const VectorXd back = dynamics::velocity_from_momentum(m, dynamics::momentum_state(m, q, qd));
        round_trip = std::max(round_trip, (back - qd).norm() / qd.norm());
        const MatrixXd j = dynamics::ee_jacobian(m, q);
        for (int k = 0; k < n; ++k) {
            VectorXd a = q, b = q;
            a[k] += h;
            b[k] -= h;
            const Eigen::Vector3d fd = (dynamics::ee_position(m, a) - dynamics::ee_position(m, b)) / (2 * h);
            jac = std::max(jac, (fd - j.col(k)).cwiseAbs().maxCoeff());
        }
    }
    const dynamics::ManipulatorModel free(c3.links(), Eigen::Vector3d::Zero(), VectorXd::Zero(3), c3.topology());
    dynamics::JointState s{Eigen::Vector3d(0.1, -0.4, 0.9), Eigen::Vector3d(0.5, -0.3, 0.8)};
    const double e0 = dynamics::kinetic_energy(free, s.q, s.qd);
    double drift = 0.0;
    for (int k = 0; k < 1000; ++k) {
        s = dynamics::step_joint(free, s, VectorXd::Zero(3), dynamics::DisturbanceSpec::none_spec(), k * 0.01, 0.01);
        drift = std::max(drift, std::abs(dynamics::kinetic_energy(free, s.q, s.qd) - e0) / e0);
    }
    const bool pass = spd_fail == 0 && skew < 1e-8 && drift < 1e-6 && round_trip < 1e-10 && jac < 1e-6;
    return {pass, "SPD failures " + std::to_string(spd_fail) + "/10000, skew " + fmt(skew) + ", energy drift " +
                      fmt(drift) + ", momentum round trip " + fmt(round_trip) + ", Jacobian FD " + fmt(jac)};
}

// ---------------------------------------------------------------- QP (8)

Verdict criterion8() {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<int> size(1, 20);
    double kkt = 0.0, dense = 0.0;
    int violations = 0, not_solved = 0;
    for (int t = 0; t < 100; ++t) {
        const int n = size(rng);
        MatrixXd a(n, n);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
        const MatrixXd h = a * a.transpose() + 0.1 * MatrixXd::Identity(n, n);
        VectorXd f(n);
        for (int i = 0; i < n; ++i) f[i] = 3.0 * nd(rng);
        auto qp = qp::QpProblem::unconstrained(h, f);
        dense = std::max(dense, (qp::solve_qp(qp).x - h.ldlt().solve(-f)).cwiseAbs().maxCoeff());
        for (int i = 0; i < n; ++i) {
            qp.lb[i] = -std::abs(nd(rng));
            qp.ub[i] = std::abs(nd(rng));
        }
        const auto r = qp::solve_qp(qp);
        if (r.status != qp::QpStatus::solved) ++not_solved;
        kkt = std::max(kkt, qp::kkt_residuals(qp, r.x, r.y).max());
        for (int i = 0; i < n; ++i) {
            if (r.x[i] < qp.lb[i] || r.x[i] > qp.ub[i]) ++violations;
        }
    }
    auto clamp = qp::QpProblem::unconstrained(MatrixXd::Constant(1, 1, 2.0), VectorXd::Constant(1, -4.0));
    clamp.ub[0] = 0.5;
    const auto c = qp::solve_qp(clamp);
    const bool exact = c.x[0] == 0.5 && c.y[0] >= 0.0;
    const bool pass = kkt < 1e-6 && dense < 1e-6 && violations == 0 && not_solved == 0 && exact;
    return {pass, "max KKT " + fmt(kkt) + ", dense gap " + fmt(dense) + ", bound violations " +
                      std::to_string(violations) + ", clamped u = " + fmt(c.x[0])};
}

// ---------------------------------------------------------------- 7-DoF substitute (10)

Verdict criterion10() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto plant = dynamics::ManipulatorModel::uniform_chain(7, 0.6, 0.15, dynamics::Topology::spatial);
    const auto ex = training::ExcitationSpec::from_json(
        {{"amplitude", 0.5}, {"gravity_compensation", true}, {"input_bound", 60.0}, {"damping", 0.2}});
    const auto ds = training::generate_dataset(plant, training::DatasetKind::actuated, 100, 1000, 0.005, ex, 11);
    const auto tc = training::TrainConfig::from_json(
        {{"epochs", 15}, {"samples_per_epoch", 20000}, {"encoder", {{"hidden", {64, 64}}, {"features", 32}}}});
    const auto model = training::train(ds, tc, koopman::Variant::proposed);
    note("7-DoF model trained in " + fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) +
         " s");
    const json extra = {{"duration", 5.0}, {"controller", {{"k1", 100.0}, {"k2", 2000.0}}}};
    bool pass = true;
    std::string detail;
    for (const std::string d : {"d1", "d2", "d3"}) {
        const auto on = track(plant, model, d, true, extra);
        const auto off = track(plant, model, d, false, extra);
        const bool ok = !on.diverged && (off.diverged || on.task_rmse <= off.task_rmse);
        pass = pass && ok;
        detail += d + " on " + fmt(on.task_rmse) + " / off " + (off.diverged ? "diverged" : fmt(off.task_rmse)) + "; ";
    }
    return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string only;
    app.add_option("--only", only, "Comma-separated criterion numbers");
    app.add_flag("--quiet", g_quiet, "Suppress progress on stderr");
    CLI11_PARSE(app, argc, argv);

    std::set<int> selected;
    std::stringstream ss(only);
    for (std::string item; std::getline(ss, item, ',');) {
        if (!item.empty()) selected.insert(std::stoi(item));
    }

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"prediction ordering", criterion1},    {"data efficiency", criterion2},
        {"parameter-count ledger", criterion3}, {"GESO convergence", criterion4},
        {"tracking without disturbance", criterion5}, {"disturbance rejection", criterion6},
        {"simulator physics", criterion7},      {"QP solver", criterion8},
        {"MPC equilibrium", criterion9},        {"7-DoF GESO dominance", criterion10},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        if (!v.pass) ++failed;
        while (!v.detail.empty() && (v.detail.back() == ' ' || v.detail.back() == ';')) v.detail.pop_back();
        std::printf("criterion %2d %s  %s: %s\n", id, v.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    v.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
