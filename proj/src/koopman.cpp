#include "mkoop/koopman.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace mkoop::koopman {

std::string to_string(Variant v) {
    switch (v) {
        case Variant::proposed: return "proposed";
        case Variant::nlk: return "nlk";
        case Variant::nbk: return "nbk";
    }
    return "proposed";
}

Variant variant_from_string(const std::string& s) {
    if (s == "proposed") return Variant::proposed;
    if (s == "nlk") return Variant::nlk;
    if (s == "nbk") return Variant::nbk;
    throw std::invalid_argument("variant: unknown value '" + s + "'");
}

std::string to_string(StateConvention c) {
    return c == StateConvention::momentum ? "momentum" : "explicit";
}

StateConvention convention_from_string(const std::string& s) {
    if (s == "momentum") return StateConvention::momentum;
    if (s == "explicit") return StateConvention::explicit_velocity;
    throw std::invalid_argument("state convention: unknown value '" + s + "'");
}

StateConvention natural_convention(Variant v) {
    return v == Variant::proposed ? StateConvention::momentum : StateConvention::explicit_velocity;
}

KoopmanModel::KoopmanModel(Variant variant, int n, int m, double dt, lifting::EncoderNetwork encoder)
    : variant_(variant), n_(n), m_(m), dt_(dt), encoder_(std::move(encoder)) {
    if (n < 1 || m < 1 || m > n) throw std::invalid_argument("koopman model: need 1 <= m <= n");
    if (!(dt > 0.0)) throw std::invalid_argument("koopman model: dt must be positive");
    if (encoder_.input_dim() != 2 * n) throw std::invalid_argument("koopman model: encoder input must be 2n");
    const int l = lifted_dim();
    a_ = MatrixXd::Identity(l, l);
    switch (variant_) {
        case Variant::proposed: b_ = dt_ * input_channel(); break;
        case Variant::nlk: b_ = MatrixXd::Zero(l, m_); break;
        case Variant::nbk: b_ = MatrixXd::Zero(m_, static_cast<Eigen::Index>(l) * m_); break;
    }
    state_scale_ = VectorXd::Ones(2 * n_);
}

void KoopmanModel::set_A(const MatrixXd& a) {
    if (a.rows() != lifted_dim() || a.cols() != lifted_dim()) throw std::invalid_argument("A: dimension mismatch");
    a_ = a;
}

void KoopmanModel::set_B(const MatrixXd& b) {
    if (!input_matrix_learnable()) throw std::logic_error("B is fixed for the proposed variant");
    if (b.rows() != b_.rows() || b.cols() != b_.cols()) throw std::invalid_argument("B: dimension mismatch");
    b_ = b;
}

void KoopmanModel::set_state_scale(const VectorXd& s) {
    if (s.size() != state_dim() || (s.array() <= 0.0).any()) throw std::invalid_argument("state scale: bad value");
    state_scale_ = s;
}

MatrixXd KoopmanModel::input_channel() const {
    MatrixXd e = MatrixXd::Zero(lifted_dim(), m_);
    e.block(n_, 0, m_, m_).setIdentity();
    return e;
}

VectorXd KoopmanModel::lift(const VectorXd& x) const { return lifting::lift(encoder_, x); }

VectorXd kron(const VectorXd& z, const VectorXd& u) {
    VectorXd out(z.size() * u.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) out.segment(i * u.size(), u.size()) = z[i] * u;
    return out;
}

VectorXd KoopmanModel::predict(const VectorXd& z, const VectorXd& u) const {
    if (z.size() != lifted_dim()) throw std::invalid_argument("predict: lifted state dimension mismatch");
    if (u.size() != m_) throw std::invalid_argument("predict: input dimension mismatch");
    VectorXd next = a_ * z;
    if (variant_ == Variant::nbk) {
        next.segment(n_, m_) += b_ * kron(z, u);
    } else {
        next += b_ * u;
    }
    return next;
}

nlohmann::json matrix_to_json(const MatrixXd& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw std::invalid_argument("matrix: data size mismatch");
    MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    }
    return m;
}

nlohmann::json KoopmanModel::to_json() const {
    return {{"format", "mkoop-koopman-model"},
            {"version", 1},
            {"variant", to_string(variant_)},
            {"state_convention", to_string(convention())},
            {"n", n_},
            {"m", m_},
            {"N", features()},
            {"dt", dt_},
            {"A", matrix_to_json(a_)},
            {"B", matrix_to_json(b_)},
            {"B_learnable", input_matrix_learnable()},
            {"encoder", encoder_.to_json()},
            {"normalization",
             {{"state_scale", std::vector<double>(state_scale_.data(), state_scale_.data() + state_scale_.size())},
              {"input_mean", encoder_.to_json()["input_mean"]},
              {"input_std", encoder_.to_json()["input_std"]}}},
            {"training", metadata_}};
}

KoopmanModel KoopmanModel::from_json(const nlohmann::json& j) {
    if (j.value("format", std::string()) != "mkoop-koopman-model") {
        throw std::invalid_argument("model file: not an mkoop-koopman-model document");
    }
    KoopmanModel model(variant_from_string(j.at("variant").get<std::string>()), j.at("n").get<int>(),
                       j.at("m").get<int>(), j.at("dt").get<double>(),
                       lifting::EncoderNetwork::from_json(j.at("encoder")));
    if (j.at("N").get<int>() != model.features()) throw std::invalid_argument("model file: N does not match encoder");
    model.set_A(matrix_from_json(j.at("A")));
    const MatrixXd b = matrix_from_json(j.at("B"));
    if (model.input_matrix_learnable()) {
        model.set_B(b);
    } else if ((b - model.B()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, model.dt())) {
        throw std::invalid_argument("model file: proposed-variant B differs from dt * E");
    }
    const auto scale = j.at("normalization").at("state_scale").get<std::vector<double>>();
    model.set_state_scale(Eigen::Map<const VectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size())));
    if (j.contains("training")) model.metadata_ = j["training"];
    return model;
}

Rollout rollout(const KoopmanModel& model, const VectorXd& x0, const std::vector<VectorXd>& inputs) {
    Rollout r;
    r.states.reserve(inputs.size() + 1);
    VectorXd z = model.lift(x0);
    r.states.push_back(model.recover(z));
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        z = model.predict(z, inputs[k]);
        if (!z.allFinite()) {
            r.diverged_at = static_cast<int>(k + 1);
            break;
        }
        r.states.push_back(model.recover(z));
    }
    return r;
}

std::size_t count_learnable_params(const KoopmanModel& model) {
    const auto l = static_cast<std::size_t>(model.lifted_dim());
    const auto m = static_cast<std::size_t>(model.inputs());
    std::size_t count = model.encoder().parameter_count() + l * l;
    switch (model.variant()) {
        case Variant::proposed: break;
        case Variant::nlk: count += l * m; break;
        case Variant::nbk: count += l * m * m; break;
    }
    return count;
}

VectorXd to_explicit(const dynamics::ManipulatorModel& manip, StateConvention c, const VectorXd& x) {
    if (c == StateConvention::explicit_velocity) return x;
    const auto ms = dynamics::MomentumState::from_stacked(x);
    VectorXd out(x.size());
    out << ms.q, dynamics::velocity_from_momentum(manip, ms);
    return out;
}

VectorXd from_explicit(const dynamics::ManipulatorModel& manip, StateConvention c, const VectorXd& x) {
    if (c == StateConvention::explicit_velocity) return x;
    const Eigen::Index n = x.size() / 2;
    return dynamics::momentum_state(manip, x.head(n), x.tail(n)).stacked();
}

StandardizedError standardized_error(const std::vector<VectorXd>& pred, const std::vector<VectorXd>& truth) {
    if (pred.size() != truth.size()) throw std::invalid_argument("standardized_error: length mismatch");
    if (truth.empty()) throw std::invalid_argument("standardized_error: empty trajectory");
    const Eigen::Index d = truth.front().size();
    const double count = static_cast<double>(truth.size());
    VectorXd mean = VectorXd::Zero(d);
    for (const auto& t : truth) mean += t;
    mean /= count;
    VectorXd var = VectorXd::Zero(d);
    VectorXd sq = VectorXd::Zero(d);
    for (std::size_t k = 0; k < truth.size(); ++k) {
        if (pred[k].size() != d || truth[k].size() != d) throw std::invalid_argument("standardized_error: dimension mismatch");
        var += (truth[k] - mean).cwiseAbs2();
        sq += (pred[k] - truth[k]).cwiseAbs2();
    }
    var /= count;
    sq /= count;
    StandardizedError out;
    double total = 0.0;
    int used = 0;
    for (Eigen::Index i = 0; i < d; ++i) {
        const double sd = std::sqrt(var[i]);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean[i])))) {
            out.excluded_dims.push_back(static_cast<int>(i));
            continue;
        }
        total += std::sqrt(sq[i]) / sd;
        ++used;
    }
    if (!out.excluded_dims.empty()) {
        std::cerr << "warning: standardized_error excluded " << out.excluded_dims.size()
                  << " zero-variance dimension(s)\n";
    }
    out.value = used > 0 ? total / used : 0.0;
    return out;
}

StandardizedError standardized_error(const std::vector<VectorXd>& pred, StateConvention pred_conv,
                                     const std::vector<VectorXd>& truth, StateConvention truth_conv,
                                     const dynamics::ManipulatorModel& manip) {
    std::vector<VectorXd> p, t;
    p.reserve(pred.size());
    t.reserve(truth.size());
    for (const auto& x : pred) p.push_back(to_explicit(manip, pred_conv, x));
    for (const auto& x : truth) t.push_back(to_explicit(manip, truth_conv, x));
    return standardized_error(p, t);
}

}  // namespace mkoop::koopman
