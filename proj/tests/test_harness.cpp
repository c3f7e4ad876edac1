#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "mkoop/harness.hpp"

using namespace mkoop;
using namespace mkoop::harness;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

namespace {

dynamics::ManipulatorModel chain3() {
    return dynamics::ManipulatorModel::uniform_chain(3, 0.6, 0.33, dynamics::Topology::spatial);
}

// Proposed-variant model with the inertia frozen at q0 and no gravity; GESO
// absorbs the rest.
koopman::KoopmanModel frozen_inertia_model(const dynamics::ManipulatorModel& plant, const VectorXd& q0, double dt) {
    const int n = plant.dof();
    koopman::KoopmanModel model(
        koopman::Variant::proposed, n, n, dt,
        lifting::EncoderNetwork({{2 * n, 3, lifting::Activation::tanh}, {3, 2, lifting::Activation::linear}}));
    MatrixXd a = MatrixXd::Identity(model.lifted_dim(), model.lifted_dim());
    a.block(0, n, n, n) = dt * dynamics::mass_matrix(plant, q0).inverse();
    model.set_A(a);
    return model;
}

}  // namespace

TEST_CASE("hypotrochoid starts at R - r + d along the first axis") {
    const auto p = PathSpec::defaults(PathKind::hypotrochoid);
    const Vector3d start = reference_path(p, 0.0);
    const Vector3d expect = p.center + p.scale * (p.big_r - p.small_r + p.pen) * p.u_axis;
    CHECK((start - expect).norm() < 1e-15);
}

TEST_CASE("helix advances linearly along its axis after the ramp") {
    const auto p = PathSpec::defaults(PathKind::helix);
    auto axial = [&](double t) { return (reference_path(p, t) - p.center).dot(p.axial); };
    const double slope = (axial(3.0) - axial(2.0)) / 1.0;
    CHECK(slope == doctest::Approx(p.helix_pitch * p.omega));
    for (double t : {4.0, 7.5, 12.0}) CHECK(axial(t) - axial(2.0) == doctest::Approx(slope * (t - 2.0)));
}

TEST_CASE("ease-in is continuous with continuous slope") {
    const double ramp = 1.0;
    CHECK(ease(0.0, ramp) == 0.0);
    CHECK(ease(ramp - 1e-9, ramp) == doctest::Approx(ease(ramp + 1e-9, ramp)));
    CHECK((ease(ramp + 1e-6, ramp) - ease(ramp - 1e-6, ramp)) / 2e-6 == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(ease(5.0, 0.0) == 5.0);
}

TEST_CASE("default paths stay at least 5 cm inside the workspace") {
    const auto c = chain3();
    for (auto kind : {PathKind::hypotrochoid, PathKind::petal, PathKind::helix}) {
        const auto p = PathSpec::defaults(kind);
        double worst = 1e9;
        for (int k = 0; k <= 2000; ++k) worst = std::min(worst, workspace_margin(c, reference_path(p, k * 0.01)));
        CHECK(worst >= 0.05);
    }
}

TEST_CASE("inverse kinematics") {
    const auto planar = dynamics::ManipulatorModel::uniform_chain(2, 0.6, 0.33, dynamics::Topology::planar);
    const Vector3d boundary(0.66 * std::cos(0.4), 0.66 * std::sin(0.4), 0.0);
    // At the singular boundary a position residual e leaves q2 ~ sqrt(2 e / l),
    // so the joint check needs a tight position tolerance.
    IkOptions tight;
    tight.tolerance = 1e-12;
    tight.max_iterations = 5000;
    const VectorXd q = inverse_kinematics(planar, boundary, Eigen::Vector2d(0.2, 0.3), tight);
    CHECK(std::abs(q[1]) < 1e-4);
    CHECK(std::abs(q[0] - 0.4) < 1e-4);
    CHECK_THROWS_AS(inverse_kinematics(planar, Vector3d(0.7, 0.0, 0.0), Eigen::Vector2d(0.2, 0.3)), UnreachableError);

    const auto c = chain3();
    const auto p = PathSpec::defaults(PathKind::hypotrochoid);
    VectorXd guess = Eigen::Vector3d(0.0, -0.5, 1.0);
    for (int k = 0; k < 20; ++k) {
        const Vector3d target = reference_path(p, k * 0.5);
        guess = inverse_kinematics(c, target, guess);
        CHECK((dynamics::ee_position(c, guess) - target).norm() < 1e-6);
    }
}

TEST_CASE("disturbance cases") {
    CHECK(disturbance_for(DisturbanceCase::d0, 3).kind == dynamics::DisturbanceKind::none);
    CHECK(disturbance_for(DisturbanceCase::d1, 3).gain == -0.6);
    CHECK((disturbance_for(DisturbanceCase::d2, 3).torque - VectorXd::Constant(3, 10.0)).norm() == 0.0);
    CHECK((disturbance_for(DisturbanceCase::d3, 3).force - Vector3d(20, 20, 20)).norm() == 0.0);
    CHECK(disturbance_case_from_string("d2") == DisturbanceCase::d2);
    CHECK_THROWS(disturbance_case_from_string("d4"));
}

TEST_CASE("zero-length path measures the regulation error") {
    const auto plant = chain3();
    TrackingConfig cfg;
    cfg.path = PathSpec::defaults(PathKind::hypotrochoid);
    cfg.path.omega = 0.0;
    cfg.duration = 3.0;
    const auto ref = joint_reference(plant, cfg.path, cfg.duration, 0.01, 1, cfg.q_guess);
    for (const auto& pt : ref.points) CHECK((pt - ref.points.front()).norm() == 0.0);

    const auto model = frozen_inertia_model(plant, ref.q.front(), 0.01);
    const auto r = run_tracking_experiment(plant, model, cfg);
    CHECK(!r.diverged);
    CHECK(r.solver_faults == 0);
    // Regulation from rest at the target: gravity sag is caught by the observer.
    CHECK(r.task_rmse < 0.01);
    const VectorXd last = r.log.q.back();
    CHECK((dynamics::ee_position(plant, last) - ref.points.front()).norm() < 1e-3);

    const auto again = run_tracking_experiment(plant, model, cfg);
    CHECK(again.task_rmse == r.task_rmse);
    CHECK(again.log.to_csv() == r.log.to_csv());
}

TEST_CASE("tracking config parsing") {
    const auto cfg = TrackingConfig::from_json(
        {{"duration", 5.0}, {"path", {{"kind", "petal"}}}, {"disturbance", "d2"}, {"controller", {{"horizon", 10}}}}, 3);
    CHECK(cfg.duration == 5.0);
    CHECK(cfg.path.kind == PathKind::petal);
    CHECK(cfg.disturbance.kind == dynamics::DisturbanceKind::constant_torque);
    CHECK(cfg.controller.horizon == 10);
    CHECK_THROWS(TrackingConfig::from_json({{"duration", -1.0}}, 3));
}

TEST_CASE("manipulator shorthand") {
    const auto m = manipulator_from_config({{"n", 3}});
    CHECK(m.dof() == 3);
    CHECK(m.links()[0].mass == 0.6);
    CHECK(m.reach() == doctest::Approx(0.99));
    CHECK(m.topology() == dynamics::Topology::spatial);
    CHECK_THROWS(manipulator_from_config(nlohmann::json::object()));
}

TEST_CASE("run_jobs covers every index and rethrows failures") {
    for (int jobs : {1, 4}) {
        std::vector<std::atomic<int>> hits(37);
        run_jobs(hits.size(), jobs, [&](std::size_t i) { hits[i]++; });
        for (const auto& h : hits) CHECK(h.load() == 1);
        CHECK_THROWS_AS(run_jobs(10, jobs, [](std::size_t i) {
                            if (i == 3) throw std::runtime_error("boom");
                        }),
                        std::runtime_error);
    }
}

TEST_CASE("report CSV round trips") {
    std::vector<TrackingRow> rows{{"hypotrochoid", "d2", "proposed", true, 4, 0.0045, 0.0123, "abc", "def"},
                                  {"helix", "d0", "proposed", false, 1, 0.1 + 0.2, 1e-7, "h1", "h2"}};
    const auto dir = std::filesystem::temp_directory_path() / "mkoop_test_report";
    std::filesystem::remove_all(dir);
    write_tracking_report(rows, dir);
    const auto back = tracking_rows_from_csv(io::read_csv(dir / "report.csv"));
    REQUIRE(back.size() == 2);
    CHECK(back[1].task_rmse == rows[1].task_rmse);
    CHECK(back[0].geso);
    CHECK(!back[1].geso);
    CHECK(back[0].config_hash == "abc");
    CHECK(tracking_rows_csv(back) == tracking_rows_csv(rows));
    CHECK(std::filesystem::exists(dir / "summary.json"));
    CHECK_THROWS_AS(prediction_rows_from_csv(io::read_csv(dir / "report.csv")), std::invalid_argument);

    PredictionReport report;
    report.rows.push_back({2, 100, koopman::Variant::proposed, 0, 0.3, 100, 1.5, 3, "c", "m"});
    report.rows.push_back({2, 100, koopman::Variant::proposed, 1, 0.1, 100, 1.5, 3, "c", "m"});
    report.rows.push_back({2, 100, koopman::Variant::proposed, 2, 0.2, 100, 1.5, 3, "c", "m"});
    CHECK(report.median(2, 100, koopman::Variant::proposed) == 0.2);
    CHECK(std::isnan(report.median(3, 100, koopman::Variant::proposed)));
    write_prediction_report(report, dir / "pred");
    const auto prows = prediction_rows_from_csv(io::read_csv(dir / "pred" / "report.csv"));
    REQUIRE(prows.size() == 3);
    CHECK(prows[2].error == 0.2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("held-out error is zero for a model that reproduces the data") {
    // Double integrator: a single link with no gravity, in explicit coordinates.
    const auto link = dynamics::ManipulatorModel::uniform_chain(1, 0.6, 0.33, dynamics::Topology::planar);
    const dynamics::ManipulatorModel manip(link.links(), Vector3d::Zero(), VectorXd::Zero(1), dynamics::Topology::planar);
    training::ExcitationSpec ex;
    ex.hold = 0.01;
    const auto ds = training::generate_dataset(manip, training::DatasetKind::actuated, 3, 41, 0.01, ex, 2,
                                               koopman::StateConvention::explicit_velocity);
    const double inertia = dynamics::mass_matrix(manip, VectorXd::Zero(1))(0, 0);
    koopman::KoopmanModel model(
        koopman::Variant::nlk, 1, 1, 0.01,
        lifting::EncoderNetwork({{2, 2, lifting::Activation::tanh}, {2, 1, lifting::Activation::linear}}));
    MatrixXd a = MatrixXd::Identity(3, 3);
    a(0, 1) = 0.01;
    model.set_A(a);
    MatrixXd b = MatrixXd::Zero(3, 1);
    b(0, 0) = 0.5e-4 / inertia;
    b(1, 0) = 0.01 / inertia;
    model.set_B(b);
    CHECK(held_out_error(model, manip, ds, 20) < 1e-9);
}
