#include "mkoop/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "mkoop/io.hpp"
#include "mkoop/simd/kernels.hpp"

namespace mkoop::training {

using koopman::KoopmanModel;

std::string to_string(DatasetKind k) { return k == DatasetKind::actuated ? "actuated" : "unactuated"; }

DatasetKind dataset_kind_from_string(const std::string& s) {
    if (s == "actuated") return DatasetKind::actuated;
    if (s == "unactuated") return DatasetKind::unactuated;
    throw std::invalid_argument("dataset kind: unknown value '" + s + "'");
}

ExcitationSpec ExcitationSpec::from_json(const nlohmann::json& j) {
    ExcitationSpec e;
    e.hold = j.value("hold", e.hold);
    e.amplitude = j.value("amplitude", e.amplitude);
    e.input_bound = j.value("input_bound", e.input_bound);
    e.gravity_compensation = j.value("gravity_compensation", e.gravity_compensation);
    e.damping = j.value("damping", e.damping);
    e.q_range = j.value("q_range", e.q_range);
    e.qd_range = j.value("qd_range", e.qd_range);
    if (!(e.hold > 0.0)) throw std::invalid_argument("excitation.hold: must be positive");
    if (e.amplitude < 0.0 || !(e.input_bound > 0.0)) throw std::invalid_argument("excitation: bad torque bounds");
    return e;
}

nlohmann::json ExcitationSpec::to_json() const {
    return {{"hold", hold},
            {"amplitude", amplitude},
            {"input_bound", input_bound},
            {"gravity_compensation", gravity_compensation},
            {"damping", damping},
            {"q_range", q_range},
            {"qd_range", qd_range}};
}

std::size_t TrajectoryDataset::pair_count() const {
    std::size_t c = 0;
    for (const auto& t : trajectories) c += static_cast<std::size_t>(std::max(0, t.snapshots() - 1));
    return c;
}

namespace {

Trajectory simulate_trajectory(const dynamics::ManipulatorModel& model, DatasetKind kind, int w, double dt,
                               const ExcitationSpec& ex, std::uint64_t seed) {
    const int n = model.dof();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    dynamics::JointState s{VectorXd(n), VectorXd(n)};
    for (int i = 0; i < n; ++i) s.q[i] = ex.q_range * unit(rng);
    for (int i = 0; i < n; ++i) s.qd[i] = ex.qd_range * unit(rng);

    Trajectory t;
    t.seed = seed;
    t.states.resize(2 * n, w);
    if (kind == DatasetKind::actuated) t.inputs.resize(n, w - 1);
    const int hold_steps = std::max(1, static_cast<int>(std::lround(ex.hold / dt)));
    VectorXd random_torque = VectorXd::Zero(n);
    const auto none = dynamics::DisturbanceSpec::none_spec();
    for (int k = 0; k < w; ++k) {
        t.states.col(k) << s.q, s.qd;
        if (k == w - 1) break;
        VectorXd u = VectorXd::Zero(n);
        if (kind == DatasetKind::actuated) {
            if (k % hold_steps == 0) {
                for (int i = 0; i < n; ++i) random_torque[i] = ex.amplitude * unit(rng);
            }
            u = random_torque - ex.damping * s.qd;
            if (ex.gravity_compensation) u += dynamics::gravity_torque(model, s.q);
            u = u.cwiseMax(-ex.input_bound).cwiseMin(ex.input_bound);
            t.inputs.col(k) = u;
        }
        s = dynamics::step_joint(model, s, u, none, k * dt, dt);
    }
    return t;
}

}  // namespace

TrajectoryDataset generate_dataset(const dynamics::ManipulatorModel& model, DatasetKind kind, int p, int w,
                                   double dt, const ExcitationSpec& excitation, std::uint64_t seed,
                                   StateConvention convention) {
    if (p < 2 || w < 2) throw std::invalid_argument("generate_dataset: p and w must be at least 2");
    if (!(dt > 0.0)) throw std::invalid_argument("generate_dataset: dt must be positive");
    TrajectoryDataset ds;
    ds.kind = kind;
    ds.convention = StateConvention::explicit_velocity;
    ds.n = model.dof();
    ds.m = model.dof();
    ds.dt = dt;
    ds.seed = seed;
    ds.manipulator = model.to_json();
    ds.excitation = excitation.to_json();
    ds.trajectories.reserve(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) {
        std::uint64_t s = io::derive_seed(seed, static_cast<std::uint64_t>(i));
        for (int attempt = 0;; ++attempt) {
            try {
                ds.trajectories.push_back(simulate_trajectory(model, kind, w, dt, excitation, s));
                break;
            } catch (const dynamics::DivergenceError&) {
                if (attempt >= 100) throw;
                ++ds.resampled;
                s = io::derive_seed(s, 0x5eed);
            }
        }
    }
    return convention == StateConvention::explicit_velocity ? ds : convert_dataset(ds, model, convention);
}

TrajectoryDataset convert_dataset(const TrajectoryDataset& ds, const dynamics::ManipulatorModel& model,
                                  StateConvention convention) {
    if (ds.convention == convention) return ds;
    TrajectoryDataset out = ds;
    out.convention = convention;
    for (auto& t : out.trajectories) {
        for (Eigen::Index k = 0; k < t.states.cols(); ++k) {
            const VectorXd x = t.states.col(k);
            const VectorXd expl = koopman::to_explicit(model, ds.convention, x);
            t.states.col(k) = koopman::from_explicit(model, convention, expl);
        }
    }
    return out;
}

void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> header{"t"};
    const char* vel = ds.convention == StateConvention::momentum ? "p" : "qd";
    for (int i = 1; i <= ds.n; ++i) header.push_back("q" + std::to_string(i));
    for (int i = 1; i <= ds.n; ++i) header.push_back(vel + std::to_string(i));
    const bool actuated = ds.kind == DatasetKind::actuated;
    if (actuated) {
        for (int i = 1; i <= ds.m; ++i) header.push_back("u" + std::to_string(i));
    }
    nlohmann::json files = nlohmann::json::array();
    nlohmann::json seeds = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
        const auto& t = ds.trajectories[i];
        char name[32];
        std::snprintf(name, sizeof(name), "traj_%04zu.csv", i);
        std::string text = io::csv_line(header);
        for (Eigen::Index k = 0; k < t.states.cols(); ++k) {
            std::vector<std::string> row{io::format_double(static_cast<double>(k) * ds.dt)};
            for (Eigen::Index r = 0; r < t.states.rows(); ++r) row.push_back(io::format_double(t.states(r, k)));
            if (actuated) {
                // No input is applied after the last snapshot.
                for (Eigen::Index r = 0; r < t.inputs.rows(); ++r) {
                    row.push_back(k < t.inputs.cols() ? io::format_double(t.inputs(r, k)) : std::string());
                }
            }
            text += io::csv_line(row);
        }
        io::write_text(dir / name, text);
        files.push_back(name);
        seeds.push_back(t.seed);
    }
    nlohmann::json manifest{{"format", "mkoop-dataset"},
                            {"version", 1},
                            {"kind", to_string(ds.kind)},
                            {"state_convention", koopman::to_string(ds.convention)},
                            {"n", ds.n},
                            {"m", ds.m},
                            {"dt", ds.dt},
                            {"p", ds.trajectories.size()},
                            {"w", ds.trajectories.empty() ? 0 : ds.trajectories.front().snapshots()},
                            {"seed", ds.seed},
                            {"trajectory_seeds", seeds},
                            {"resampled", ds.resampled},
                            {"manipulator", ds.manipulator},
                            {"excitation", ds.excitation},
                            {"files", files}};
    io::write_json(dir / "manifest.json", manifest);
}

TrajectoryDataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest = io::read_json(dir / "manifest.json");
    if (manifest.value("format", std::string()) != "mkoop-dataset") {
        throw std::runtime_error((dir / "manifest.json").string() + ": not an mkoop-dataset manifest");
    }
    TrajectoryDataset ds;
    ds.kind = dataset_kind_from_string(manifest.at("kind").get<std::string>());
    ds.convention = koopman::convention_from_string(manifest.at("state_convention").get<std::string>());
    ds.n = manifest.at("n").get<int>();
    ds.m = manifest.at("m").get<int>();
    ds.dt = manifest.at("dt").get<double>();
    ds.seed = manifest.value("seed", std::uint64_t{0});
    ds.resampled = manifest.value("resampled", 0);
    ds.manipulator = manifest.value("manipulator", nlohmann::json::object());
    ds.excitation = manifest.value("excitation", nlohmann::json::object());
    const auto seeds = manifest.value("trajectory_seeds", std::vector<std::uint64_t>{});
    const bool actuated = ds.kind == DatasetKind::actuated;
    const int cols = 1 + 2 * ds.n + (actuated ? ds.m : 0);
    std::size_t idx = 0;
    for (const auto& f : manifest.at("files")) {
        const auto table = io::read_csv(dir / f.get<std::string>());
        if (static_cast<int>(table.header.size()) != cols) {
            throw std::runtime_error(f.get<std::string>() + ": unexpected column count");
        }
        Trajectory t;
        const auto w = static_cast<Eigen::Index>(table.rows.size());
        t.states.resize(2 * ds.n, w);
        if (actuated) t.inputs.resize(ds.m, w - 1);
        for (Eigen::Index k = 0; k < w; ++k) {
            const auto& row = table.rows[static_cast<std::size_t>(k)];
            for (int r = 0; r < 2 * ds.n; ++r) t.states(r, k) = std::stod(row[1 + r]);
            if (actuated && k < w - 1) {
                for (int r = 0; r < ds.m; ++r) t.inputs(r, k) = std::stod(row[1 + 2 * ds.n + r]);
            }
        }
        t.seed = idx < seeds.size() ? seeds[idx] : 0;
        ds.trajectories.push_back(std::move(t));
        ++idx;
    }
    return ds;
}

void TrainConfig::validate() const {
    if (!(alpha1 > 0.0)) throw std::invalid_argument("alpha1: must be positive");
    if (!(alpha2 > 0.0)) throw std::invalid_argument("alpha2: must be positive");
    if (gamma1 < 0.0) throw std::invalid_argument("gamma1: must be non-negative");
    if (gamma2 < 0.0) throw std::invalid_argument("gamma2: must be non-negative");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate: must be positive");
    if (!(lr_final_ratio > 0.0) || lr_final_ratio > 1.0) throw std::invalid_argument("lr_final_ratio: must be in (0, 1]");
    if (batch_size < 1) throw std::invalid_argument("batch_size: must be positive");
    if (epochs < 0) throw std::invalid_argument("epochs: must be non-negative");
    if (horizon < 1) throw std::invalid_argument("horizon: must be at least 1");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw std::invalid_argument("validation_fraction: must be in [0, 1)");
    }
    if (encoder.features < 1) throw std::invalid_argument("encoder.features: must be positive");
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.alpha1 = j.value("alpha1", c.alpha1);
    c.alpha2 = j.value("alpha2", c.alpha2);
    c.gamma1 = j.value("gamma1", c.gamma1);
    c.gamma2 = j.value("gamma2", c.gamma2);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_final_ratio = j.value("lr_final_ratio", c.lr_final_ratio);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.patience = j.value("patience", c.patience);
    c.horizon = j.value("horizon", c.horizon);
    c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
    c.validation_samples = j.value("validation_samples", c.validation_samples);
    c.least_squares_init = j.value("least_squares_init", c.least_squares_init);
    if (j.contains("encoder")) {
        const auto& e = j["encoder"];
        c.encoder.hidden = e.value("hidden", c.encoder.hidden);
        c.encoder.features = e.value("features", c.encoder.features);
        c.encoder.hidden_activation =
            lifting::activation_from_string(e.value("activation", std::string("tanh")));
    }
    if (j.contains("N")) c.encoder.features = j["N"].get<int>();
    c.validate();
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"alpha1", alpha1},
            {"alpha2", alpha2},
            {"gamma1", gamma1},
            {"gamma2", gamma2},
            {"learning_rate", learning_rate},
            {"lr_final_ratio", lr_final_ratio},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seed", seed},
            {"validation_fraction", validation_fraction},
            {"patience", patience},
            {"horizon", horizon},
            {"samples_per_epoch", samples_per_epoch},
            {"validation_samples", validation_samples},
            {"least_squares_init", least_squares_init},
            {"encoder",
             {{"hidden", encoder.hidden},
              {"features", encoder.features},
              {"activation", lifting::to_string(encoder.hidden_activation)}}}};
}

std::vector<double> pack_parameters(const KoopmanModel& model) {
    const auto enc = model.encoder().parameters();
    std::vector<double> theta(enc.begin(), enc.end());
    const auto& a = model.A();
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (Eigen::Index c = 0; c < a.cols(); ++c) theta.push_back(a(r, c));
    }
    if (model.input_matrix_learnable()) {
        const auto& b = model.B();
        for (Eigen::Index r = 0; r < b.rows(); ++r) {
            for (Eigen::Index c = 0; c < b.cols(); ++c) theta.push_back(b(r, c));
        }
    }
    return theta;
}

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t theta_size(const KoopmanModel& model) {
    std::size_t s = model.encoder().parameter_count() +
                    static_cast<std::size_t>(model.lifted_dim()) * static_cast<std::size_t>(model.lifted_dim());
    if (model.input_matrix_learnable()) s += static_cast<std::size_t>(model.B().size());
    return s;
}

}  // namespace

void unpack_parameters(std::span<const double> theta, KoopmanModel& model) {
    if (theta.size() != theta_size(model)) throw std::invalid_argument("unpack_parameters: size mismatch");
    auto enc = model.encoder().parameters();
    std::copy(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(enc.size()), enc.begin());
    std::size_t off = enc.size();
    const Eigen::Index l = model.lifted_dim();
    model.set_A(Eigen::Map<const RowMajor>(theta.data() + off, l, l));
    off += static_cast<std::size_t>(l * l);
    if (model.input_matrix_learnable()) {
        model.set_B(Eigen::Map<const RowMajor>(theta.data() + off, model.B().rows(), model.B().cols()));
    }
}

LossValue loss(const KoopmanModel& model, const WindowBatch& batch, const TrainConfig& cfg,
               std::vector<double>* gradient) {
    const int h = batch.horizon;
    const std::size_t nb = batch.windows();
    if (nb == 0 || batch.states.size() != nb * static_cast<std::size_t>(h + 1)) {
        throw std::invalid_argument("loss: malformed batch");
    }
    const bool actuated = !batch.inputs.empty();
    if (actuated && batch.inputs.size() != nb * static_cast<std::size_t>(h)) {
        throw std::invalid_argument("loss: input count does not match windows");
    }
    if (!actuated && model.variant() != Variant::proposed) {
        throw std::invalid_argument("loss: baseline variants need actuated batches");
    }
    const int n = model.dof();
    const int m = model.inputs();
    const int sd = model.state_dim();
    const int nf = model.features();
    const int l = model.lifted_dim();
    const auto& enc = model.encoder();
    const auto cols = static_cast<Eigen::Index>(nb);

    // Encode every state of every window in one pass.
    const std::size_t rows = nb * static_cast<std::size_t>(h + 1);
    std::vector<double> xin(rows * static_cast<std::size_t>(sd));
    for (std::size_t r = 0; r < rows; ++r) {
        const auto& x = batch.states[r];
        if (x.size() != sd) throw std::invalid_argument("loss: state dimension mismatch");
        std::copy(x.data(), x.data() + sd, xin.begin() + static_cast<std::ptrdiff_t>(r * sd));
    }
    lifting::EncoderNetwork::Workspace ws;
    const auto phi = enc.forward(xin, rows, ws);

    std::vector<MatrixXd> ztrue(static_cast<std::size_t>(h + 1), MatrixXd(l, cols));
    for (int j = 0; j <= h; ++j) {
        auto& zj = ztrue[static_cast<std::size_t>(j)];
        for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t r = b * static_cast<std::size_t>(h + 1) + static_cast<std::size_t>(j);
            zj.col(static_cast<Eigen::Index>(b)).head(sd) = batch.states[r];
            zj.col(static_cast<Eigen::Index>(b)).tail(nf) =
                Eigen::Map<const VectorXd>(phi.data() + r * static_cast<std::size_t>(nf), nf);
        }
    }
    std::vector<MatrixXd> uj;
    if (actuated) {
        uj.assign(static_cast<std::size_t>(h), MatrixXd(m, cols));
        for (int j = 0; j < h; ++j) {
            for (std::size_t b = 0; b < nb; ++b) {
                uj[static_cast<std::size_t>(j)].col(static_cast<Eigen::Index>(b)) =
                    batch.inputs[b * static_cast<std::size_t>(h) + static_cast<std::size_t>(j)];
            }
        }
    }

    const MatrixXd& a = model.A();
    const MatrixXd& bm = model.B();
    const bool bilinear = model.variant() == Variant::nbk;
    // Slices of the bilinear B: column block k multiplies u_k, bslice[k] is m x L.
    std::vector<MatrixXd> bslice;
    if (bilinear) {
        bslice.assign(static_cast<std::size_t>(m), MatrixXd(m, l));
        for (int k = 0; k < m; ++k) {
            for (int i = 0; i < l; ++i) bslice[static_cast<std::size_t>(k)].col(i) = bm.col(i * m + k);
        }
    }

    std::vector<MatrixXd> zhat(static_cast<std::size_t>(h + 1));
    zhat[0] = ztrue[0];
    for (int j = 1; j <= h; ++j) {
        const MatrixXd& prev = zhat[static_cast<std::size_t>(j - 1)];
        MatrixXd next = a * prev;
        if (actuated) {
            const MatrixXd& u = uj[static_cast<std::size_t>(j - 1)];
            if (bilinear) {
                for (int k = 0; k < m; ++k) {
                    next.middleRows(n, m) +=
                        (bslice[static_cast<std::size_t>(k)] * prev) * u.row(k).asDiagonal();
                }
            } else {
                next += bm * u;
            }
        }
        zhat[static_cast<std::size_t>(j)] = std::move(next);
    }

    const VectorXd inv_scale = model.state_scale().cwiseInverse();
    const double norm = 1.0 / (static_cast<double>(nb) * h);
    LossValue out;
    std::vector<MatrixXd> gzhat;   // dL/dzhat_j
    std::vector<MatrixXd> gztrue;  // dL/dz_j (feature rows used)
    if (gradient) {
        gzhat.assign(static_cast<std::size_t>(h + 1), MatrixXd::Zero(l, cols));
        gztrue.assign(static_cast<std::size_t>(h + 1), MatrixXd::Zero(l, cols));
    }
    for (int j = 1; j <= h; ++j) {
        MatrixXd rl = ztrue[static_cast<std::size_t>(j)] - zhat[static_cast<std::size_t>(j)];
        rl.topRows(sd) = inv_scale.asDiagonal() * rl.topRows(sd);
        const Eigen::RowVectorXd np = rl.topRows(sd).colwise().norm();
        const Eigen::RowVectorXd nl = rl.colwise().norm();
        out.prediction += np.sum();
        out.lifting += nl.sum();
        if (gradient) {
            auto& gh = gzhat[static_cast<std::size_t>(j)];
            auto& gt = gztrue[static_cast<std::size_t>(j)];
            for (Eigen::Index b = 0; b < cols; ++b) {
                const double cp = np[b] > 1e-12 ? cfg.alpha1 * norm / np[b] : 0.0;
                const double cl = nl[b] > 1e-12 ? cfg.alpha2 * norm / nl[b] : 0.0;
                gh.col(b).head(sd) = -(cp + cl) * inv_scale.cwiseProduct(rl.col(b).head(sd));
                gh.col(b).tail(nf) = -cl * rl.col(b).tail(nf);
                gt.col(b).tail(nf) = cl * rl.col(b).tail(nf);
            }
        }
    }
    out.prediction *= norm;
    out.lifting *= norm;

    // Regularization over every trainable parameter.
    const std::vector<double> theta = pack_parameters(model);
    double l1 = 0.0;
    double l2sq = 0.0;
    for (double t : theta) {
        l1 += std::abs(t);
        l2sq += t * t;
    }
    const double l2 = std::sqrt(l2sq);
    out.regularization = cfg.gamma1 * l1 + cfg.gamma2 * l2;
    out.total = cfg.alpha1 * out.prediction + cfg.alpha2 * out.lifting + out.regularization;
    if (!gradient) return out;

    gradient->assign(theta.size(), 0.0);
    const std::size_t enc_size = enc.parameter_count();
    MatrixXd ga = MatrixXd::Zero(l, l);
    MatrixXd gb = MatrixXd::Zero(bm.rows(), bm.cols());
    for (int j = h; j >= 1; --j) {
        const MatrixXd& g = gzhat[static_cast<std::size_t>(j)];
        const MatrixXd& prev = zhat[static_cast<std::size_t>(j - 1)];
        ga.noalias() += g * prev.transpose();
        MatrixXd gprev = a.transpose() * g;
        if (actuated) {
            const MatrixXd& u = uj[static_cast<std::size_t>(j - 1)];
            if (bilinear) {
                const MatrixXd gv = g.middleRows(n, m);
                for (int k = 0; k < m; ++k) {
                    const MatrixXd gvu = gv * u.row(k).asDiagonal();
                    const MatrixXd gs = gvu * prev.transpose();  // m x L
                    for (int i = 0; i < l; ++i) gb.col(i * m + k) += gs.col(i);
                    gprev.noalias() += bslice[static_cast<std::size_t>(k)].transpose() * gvu;
                }
            } else if (model.input_matrix_learnable()) {
                gb.noalias() += g * u.transpose();
            }
        }
        gzhat[static_cast<std::size_t>(j - 1)] += gprev;
    }
    // zhat_0 is the lifted measurement itself.
    gztrue[0] += gzhat[0];

    std::vector<double> dphi(rows * static_cast<std::size_t>(nf));
    for (int j = 0; j <= h; ++j) {
        const MatrixXd& g = gztrue[static_cast<std::size_t>(j)];
        for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t r = b * static_cast<std::size_t>(h + 1) + static_cast<std::size_t>(j);
            Eigen::Map<VectorXd>(dphi.data() + r * static_cast<std::size_t>(nf), nf) =
                g.col(static_cast<Eigen::Index>(b)).tail(nf);
        }
    }
    std::span<double> gall(*gradient);
    enc.backward(ws, dphi, gall.first(enc_size));
    std::size_t off = enc_size;
    for (Eigen::Index r = 0; r < l; ++r) {
        for (Eigen::Index c = 0; c < l; ++c) (*gradient)[off++] = ga(r, c);
    }
    if (model.input_matrix_learnable()) {
        for (Eigen::Index r = 0; r < gb.rows(); ++r) {
            for (Eigen::Index c = 0; c < gb.cols(); ++c) (*gradient)[off++] = gb(r, c);
        }
    }
    const double inv_l2 = l2 > 0.0 ? 1.0 / l2 : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double t = theta[i];
        (*gradient)[i] += cfg.gamma1 * ((t > 0.0) - (t < 0.0)) + cfg.gamma2 * t * inv_l2;
    }
    return out;
}

namespace {

struct WindowRef {
    std::size_t trajectory;
    int start;
};

WindowBatch make_batch(const TrajectoryDataset& ds, std::span<const WindowRef> refs, int horizon,
                       bool with_inputs) {
    WindowBatch b;
    b.horizon = horizon;
    b.states.reserve(refs.size() * static_cast<std::size_t>(horizon + 1));
    if (with_inputs) b.inputs.reserve(refs.size() * static_cast<std::size_t>(horizon));
    for (const auto& r : refs) {
        const auto& t = ds.trajectories[r.trajectory];
        for (int j = 0; j <= horizon; ++j) b.states.emplace_back(t.states.col(r.start + j));
        if (with_inputs) {
            for (int j = 0; j < horizon; ++j) b.inputs.emplace_back(t.inputs.col(r.start + j));
        }
    }
    return b;
}

constexpr double kRidge = 1e-6;

MatrixXd ridge_solve(const MatrixXd& target, const MatrixXd& regressors) {
    // argmin_W ||target - W regressors||^2 + lambda ||W D||^2, D = regressor RMS.
    // Scaling the penalty per regressor keeps small-magnitude coordinates from
    // being either over-penalized or left ill-conditioned.
    const auto k = static_cast<double>(regressors.cols());
    const VectorXd rms = (regressors.rowwise().squaredNorm() / k).cwiseSqrt().cwiseMax(1e-12);
    const MatrixXd scaled = rms.cwiseInverse().asDiagonal() * regressors;
    MatrixXd gram = scaled * scaled.transpose();
    gram.diagonal().array() += kRidge * k;
    const MatrixXd rhs = scaled * target.transpose();
    return (rms.cwiseInverse().asDiagonal() * gram.ldlt().solve(rhs)).transpose();
}

void least_squares_init(KoopmanModel& model, const TrajectoryDataset& ds, std::span<const WindowRef> pool,
                        bool actuated, std::mt19937_64& rng) {
    const std::size_t cap = 20000;
    std::vector<WindowRef> pick(pool.begin(), pool.end());
    if (pick.size() > cap) {
        std::shuffle(pick.begin(), pick.end(), rng);
        pick.resize(cap);
    }
    const int n = model.dof();
    const int m = model.inputs();
    const int l = model.lifted_dim();
    const auto k = static_cast<Eigen::Index>(pick.size());
    MatrixXd z(l, k), zn(l, k), u(m, actuated ? k : 0);
    for (Eigen::Index i = 0; i < k; ++i) {
        const auto& t = ds.trajectories[pick[static_cast<std::size_t>(i)].trajectory];
        const int s = pick[static_cast<std::size_t>(i)].start;
        z.col(i) = model.lift(t.states.col(s));
        zn.col(i) = model.lift(t.states.col(s + 1));
        if (actuated) u.col(i) = t.inputs.col(s);
    }
    switch (model.variant()) {
        case Variant::proposed: {
            const MatrixXd target = actuated ? MatrixXd(zn - model.B() * u) : zn;
            model.set_A(ridge_solve(target, z));
            break;
        }
        case Variant::nlk: {
            MatrixXd reg(l + m, k);
            reg << z, u;
            const MatrixXd w = ridge_solve(zn, reg);
            model.set_A(w.leftCols(l));
            model.set_B(w.rightCols(m));
            break;
        }
        case Variant::nbk: {
            MatrixXd a = ridge_solve(zn, z);
            MatrixXd reg(l + static_cast<Eigen::Index>(l) * m, k);
            reg.topRows(l) = z;
            for (Eigen::Index i = 0; i < k; ++i) reg.col(i).tail(l * m) = koopman::kron(z.col(i), u.col(i));
            const MatrixXd w = ridge_solve(zn.middleRows(n, m), reg);
            a.middleRows(n, m) = w.leftCols(l);
            model.set_A(a);
            model.set_B(w.rightCols(static_cast<Eigen::Index>(l) * m));
            break;
        }
    }
}

// Diagonal reparameterization theta = c * w used by the optimizer. A acts in
// coordinates scaled by the state standard deviation, so every entry of w has
// a comparable effect on the standardized residual. Without it, Adam's
// per-entry step of about lr swamps the small-scale momentum rows.
std::vector<double> preconditioner(const KoopmanModel& model, const VectorXd& input_scale) {
    const int n = model.dof();
    const int m = model.inputs();
    const int l = model.lifted_dim();
    VectorXd sz = VectorXd::Ones(l);
    sz.head(model.state_dim()) = model.state_scale();
    std::vector<double> c(model.encoder().parameter_count(), 1.0);
    for (int i = 0; i < l; ++i) {
        for (int j = 0; j < l; ++j) c.push_back(sz[i] / sz[j]);
    }
    if (model.variant() == Variant::nlk) {
        for (int i = 0; i < l; ++i) {
            for (int j = 0; j < m; ++j) c.push_back(sz[i] / input_scale[j]);
        }
    } else if (model.variant() == Variant::nbk) {
        for (int r = 0; r < m; ++r) {
            for (int i = 0; i < l; ++i) {
                for (int j = 0; j < m; ++j) c.push_back(sz[n + r] / (sz[i] * input_scale[j]));
            }
        }
    }
    return c;
}

}  // namespace

KoopmanModel train(const TrajectoryDataset& ds, const TrainConfig& cfg, Variant variant, TrainReport* report,
                   const EpochCallback& on_epoch) {
    cfg.validate();
    const bool actuated = ds.kind == DatasetKind::actuated;
    if (variant != Variant::proposed && !actuated) {
        throw std::invalid_argument("train: " + koopman::to_string(variant) + " needs an actuated dataset");
    }
    if (ds.convention != koopman::natural_convention(variant)) {
        throw std::invalid_argument("train: " + koopman::to_string(variant) + " expects " +
                                    koopman::to_string(koopman::natural_convention(variant)) + " states");
    }
    if (ds.trajectories.empty()) throw std::invalid_argument("train: empty dataset");
    const int h = cfg.horizon;

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(ds.trajectories.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_val = 0;
    if (cfg.validation_fraction > 0.0 && order.size() >= 2) {
        n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.validation_fraction * order.size())));
        n_val = std::min(n_val, order.size() - 1);
    }
    std::vector<WindowRef> train_windows, val_windows;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& t = ds.trajectories[order[i]];
        auto& dst = i < n_val ? val_windows : train_windows;
        for (int s = 0; s + h < t.snapshots(); ++s) dst.push_back({order[i], s});
    }
    if (train_windows.empty()) throw std::invalid_argument("train: trajectories shorter than the horizon");

    // Standardization from the training split.
    const int sd = 2 * ds.n;
    VectorXd mean = VectorXd::Zero(sd), sq = VectorXd::Zero(sd);
    double count = 0.0;
    for (std::size_t i = n_val; i < order.size(); ++i) {
        const auto& st = ds.trajectories[order[i]].states;
        mean += st.rowwise().sum();
        sq += st.cwiseAbs2().rowwise().sum();
        count += static_cast<double>(st.cols());
    }
    mean /= count;
    VectorXd stddev = (sq / count - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
    for (Eigen::Index i = 0; i < sd; ++i) stddev[i] = std::max(stddev[i], 1e-6);

    lifting::EncoderNetwork enc(sd, cfg.encoder, io::derive_seed(cfg.seed, 1));
    enc.set_normalization(mean, stddev);
    KoopmanModel model(variant, ds.n, ds.m, ds.dt, std::move(enc));
    model.set_state_scale(stddev);

    std::vector<WindowRef> val_subset = val_windows;
    if (val_subset.size() > cfg.validation_samples) {
        std::shuffle(val_subset.begin(), val_subset.end(), rng);
        val_subset.resize(cfg.validation_samples);
    }
    auto validation_loss = [&](const KoopmanModel& mdl) {
        if (val_subset.empty()) return std::numeric_limits<double>::quiet_NaN();
        double total = 0.0;
        const std::size_t chunk = 1024;
        for (std::size_t i = 0; i < val_subset.size(); i += chunk) {
            const auto part = std::span<const WindowRef>(val_subset).subspan(i, std::min(chunk, val_subset.size() - i));
            const auto lv = loss(mdl, make_batch(ds, part, h, actuated), cfg);
            total += (cfg.alpha1 * lv.prediction + cfg.alpha2 * lv.lifting) * static_cast<double>(part.size());
        }
        return total / static_cast<double>(val_subset.size());
    };

    // The least-squares fit is one-step optimal but can be unstable over a
    // multi-step horizon; keep it only when it improves the validation loss.
    std::string init_kind = "default";
    if (cfg.least_squares_init) {
        KoopmanModel fitted = model;
        least_squares_init(fitted, ds, train_windows, actuated, rng);
        const double v_default = validation_loss(model);
        const double v_fitted = validation_loss(fitted);
        if (!(v_fitted >= v_default)) {
            model = std::move(fitted);
            init_kind = "least_squares";
        }
    }
    const MatrixXd b_initial = model.B();

    VectorXd input_scale = VectorXd::Ones(ds.m);
    if (actuated) {
        VectorXd usum = VectorXd::Zero(ds.m), usq = VectorXd::Zero(ds.m);
        double ucount = 0.0;
        for (std::size_t i = n_val; i < order.size(); ++i) {
            const auto& in = ds.trajectories[order[i]].inputs;
            usum += in.rowwise().sum();
            usq += in.cwiseAbs2().rowwise().sum();
            ucount += static_cast<double>(in.cols());
        }
        const VectorXd umean = usum / ucount;
        input_scale = (usq / ucount - umean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-6);
    }
    const std::vector<double> precond = preconditioner(model, input_scale);

    std::vector<double> theta = pack_parameters(model);
    std::vector<double> best = theta;
    std::vector<double> w(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) w[i] = theta[i] / precond[i];
    std::vector<double> grad, adam_m(theta.size(), 0.0), adam_v(theta.size(), 0.0);
    const auto& kern = simd::kernels();
    const double beta1 = 0.9, beta2 = 0.999;
    double pow1 = 1.0, pow2 = 1.0;

    TrainReport rep;
    double best_val = validation_loss(model);
    if (!std::isfinite(best_val)) best_val = std::numeric_limits<double>::infinity();
    rep.best_epoch = 0;
    int since_best = 0;
    std::vector<WindowRef> perm = train_windows;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::size_t cursor = 0;
    const std::size_t per_epoch = cfg.samples_per_epoch > 0 ? cfg.samples_per_epoch : train_windows.size();
    const auto batch_size = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Exponential decay from learning_rate to learning_rate * lr_final_ratio.
        const double frac = cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 0.0;
        const double lr = cfg.learning_rate * std::pow(cfg.lr_final_ratio, frac);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        while (seen < per_epoch) {
            if (cursor >= perm.size()) {
                std::shuffle(perm.begin(), perm.end(), rng);
                cursor = 0;
            }
            const std::size_t take = std::min({batch_size, per_epoch - seen, perm.size() - cursor});
            const auto refs = std::span<const WindowRef>(perm).subspan(cursor, take);
            cursor += take;
            seen += take;
            const auto lv = loss(model, make_batch(ds, refs, h, actuated), cfg, &grad);
            if (!std::isfinite(lv.total)) {
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                         " (prediction " + io::format_double(lv.prediction) + ", lifting " +
                                         io::format_double(lv.lifting) + ")");
            }
            epoch_loss += lv.total * static_cast<double>(take);
            pow1 *= beta1;
            pow2 *= beta2;
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= precond[i];
            const simd::AdamStep step{lr, beta1, beta2, 1e-8, 1.0 - pow1, 1.0 - pow2};
            kern.adam(w.size(), step, grad.data(), adam_m.data(), adam_v.data(), w.data());
            for (std::size_t i = 0; i < w.size(); ++i) theta[i] = precond[i] * w[i];
            unpack_parameters(theta, model);
        }
        epoch_loss /= static_cast<double>(seen);
        const double val = val_subset.empty() ? epoch_loss : validation_loss(model);
        rep.train_loss.push_back(epoch_loss);
        rep.validation_loss.push_back(val);
        if (on_epoch) on_epoch(epoch, epoch_loss, val);
        if (val < best_val) {
            best_val = val;
            best = theta;
            rep.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            rep.early_stopped = true;
            break;
        }
    }
    unpack_parameters(best, model);
    if (!model.input_matrix_learnable() && model.B() != b_initial) {
        throw std::logic_error("train: fixed input matrix was modified");
    }

    auto& meta = model.metadata();
    meta["config"] = cfg.to_json();
    meta["seed"] = cfg.seed;
    meta["train_loss"] = rep.train_loss;
    meta["validation_loss"] = rep.validation_loss;
    meta["init"] = init_kind;
    meta["best_epoch"] = rep.best_epoch;
    meta["early_stopped"] = rep.early_stopped;
    meta["dataset"] = {{"kind", to_string(ds.kind)},
                       {"p", ds.trajectories.size()},
                       {"w", ds.trajectories.front().snapshots()},
                       {"seed", ds.seed},
                       {"validation_trajectories", n_val}};
    if (!ds.manipulator.is_null() && !ds.manipulator.empty()) meta["manipulator"] = ds.manipulator;
    if (report) *report = std::move(rep);
    return model;
}

}  // namespace mkoop::training
