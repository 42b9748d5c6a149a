#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "critstate/binary_io.hpp"
#include "critstate/env.hpp"
#include "critstate/mdp.hpp"
#include "critstate/policy.hpp"
#include "critstate/qnetwork.hpp"
#include "critstate/replay.hpp"
#include "critstate/rng.hpp"
#include "critstate/rollout.hpp"
#include "critstate/sha256.hpp"

namespace critstate {

enum class OptimizerKind : std::uint32_t { sgd = 0, adam = 1 };

struct TrainConfig {
    std::size_t iterations = 10'000;
    std::size_t steps_per_iteration = 1;  // environment steps per iteration, each followed by one gradient step
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double alpha = 0.1;
    double discount = 0.95;
    std::size_t replay_capacity = 50'000;
    std::size_t target_update_period = 100;
    std::uint64_t seed = 1;
    std::vector<std::size_t> hidden_layers{64, 64};
    std::size_t warmup = 0;  // gradient steps start once the buffer holds max(batch, warmup)
    std::size_t basis_knots = 0;  // 0 = independent output per action
    OptimizerKind optimizer = OptimizerKind::sgd;

    void validate() const {
        if (iterations == 0 || steps_per_iteration == 0 || batch_size == 0 || replay_capacity == 0 || target_update_period == 0)
            throw std::invalid_argument("TrainConfig: counts must be positive");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
        if (!(alpha > 0.0)) throw std::invalid_argument("TrainConfig: alpha must be positive");
        if (!(discount > 0.0 && discount <= 1.0)) throw std::invalid_argument("TrainConfig: discount must be in (0, 1]");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"iterations", c.iterations},
         {"steps_per_iteration", c.steps_per_iteration},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"alpha", c.alpha},
         {"discount", c.discount},
         {"replay_capacity", c.replay_capacity},
         {"target_update_period", c.target_update_period},
         {"seed", c.seed},
         {"hidden_layers", c.hidden_layers},
         {"warmup", c.warmup},
         {"basis_knots", c.basis_knots},
         {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.iterations = j.value("iterations", c.iterations);
    c.steps_per_iteration = j.value("steps_per_iteration", c.steps_per_iteration);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.alpha = j.value("alpha", c.alpha);
    c.discount = j.value("discount", c.discount);
    c.replay_capacity = j.value("replay_capacity", c.replay_capacity);
    c.target_update_period = j.value("target_update_period", c.target_update_period);
    c.seed = j.value("seed", c.seed);
    c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
    c.warmup = j.value("warmup", c.warmup);
    c.basis_knots = j.value("basis_knots", c.basis_knots);
    const std::string opt = j.value("optimizer", std::string(c.optimizer == OptimizerKind::adam ? "adam" : "sgd"));
    if (opt == "sgd") c.optimizer = OptimizerKind::sgd;
    else if (opt == "adam") c.optimizer = OptimizerKind::adam;
    else throw std::invalid_argument("TrainConfig: unknown optimizer " + opt);
    c.validate();
}

/// Trained network plus everything needed to rebuild its environment and
/// verify its integrity.
struct PolicyCheckpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    std::string env_name;
    nlohmann::json env_config = nlohmann::json::object();
    std::vector<double> action_grid;
    QNetwork network;
    TrainConfig config;
    std::size_t iterations_trained = 0;
    std::string hash;  // hex SHA-256 of the serialized body

    std::vector<std::uint8_t> body_bytes() const {
        ByteWriter w;
        w.bytes("CSQ1", 4);
        w.u32(kFormatVersion);
        w.str(env_name);
        const auto& sizes = network.layer_sizes();
        w.u32(static_cast<std::uint32_t>(sizes.size()));
        for (std::size_t s : sizes) w.u64(s);
        w.f64(config.alpha);
        w.u64(iterations_trained);
        w.str(env_config.dump());
        w.u32(static_cast<std::uint32_t>(action_grid.size()));
        w.f64s(action_grid);
        w.u64(config.iterations);
        w.u64(config.steps_per_iteration);
        w.u64(config.batch_size);
        w.f64(config.learning_rate);
        w.f64(config.discount);
        w.u64(config.replay_capacity);
        w.u64(config.target_update_period);
        w.u64(config.seed);
        w.u64(config.warmup);
        w.u64(network.basis_knots());
        w.u32(static_cast<std::uint32_t>(config.optimizer));
        w.u32(static_cast<std::uint32_t>(config.hidden_layers.size()));
        for (std::size_t h : config.hidden_layers) w.u64(h);
        const auto params = network.flat_parameters();
        w.f64s(params);
        return std::move(w.buffer());
    }

    std::string compute_hash() const { return sha256_hex(body_bytes()); }

    void seal() { hash = compute_hash(); }

    void validate() const {
        if (action_grid.size() != network.output_dim())
            throw std::invalid_argument("PolicyCheckpoint: action grid length differs from network output");
        if (!network.finite()) throw std::invalid_argument("PolicyCheckpoint: non-finite parameters");
        if (hash != compute_hash()) throw std::runtime_error("PolicyCheckpoint: content hash mismatch");
    }

    /// Body followed by the raw 32-byte digest.
    std::vector<std::uint8_t> serialize() const {
        auto bytes = body_bytes();
        const Digest d = sha256(bytes);
        bytes.insert(bytes.end(), d.begin(), d.end());
        return bytes;
    }

    static PolicyCheckpoint deserialize(std::span<const std::uint8_t> bytes) {
        if (bytes.size() < 36) throw std::runtime_error("checkpoint truncated");
        const auto body = bytes.first(bytes.size() - 32);
        const Digest stored = [&] {
            Digest d{};
            std::copy(bytes.end() - 32, bytes.end(), d.begin());
            return d;
        }();
        if (sha256(body) != stored) throw std::runtime_error("checkpoint hash mismatch");

        ByteReader r(body);
        char magic[4];
        r.bytes(magic, 4);
        if (std::string(magic, 4) != "CSQ1") throw std::runtime_error("not a CSQ1 checkpoint");
        if (r.u32() != kFormatVersion) throw std::runtime_error("unsupported checkpoint version");
        PolicyCheckpoint c;
        c.env_name = r.str();
        std::vector<std::size_t> sizes(r.u32());
        for (auto& s : sizes) s = r.u64();
        c.config.alpha = r.f64();
        c.iterations_trained = r.u64();
        c.env_config = nlohmann::json::parse(r.str());
        c.action_grid = r.f64s(r.u32());
        c.config.iterations = r.u64();
        c.config.steps_per_iteration = r.u64();
        c.config.batch_size = r.u64();
        c.config.learning_rate = r.f64();
        c.config.discount = r.f64();
        c.config.replay_capacity = r.u64();
        c.config.target_update_period = r.u64();
        c.config.seed = r.u64();
        c.config.warmup = r.u64();
        c.config.basis_knots = r.u64();
        c.config.optimizer = static_cast<OptimizerKind>(r.u32());
        c.config.hidden_layers.resize(r.u32());
        for (auto& h : c.config.hidden_layers) h = r.u64();
        c.network = QNetwork::zeros(sizes, c.config.basis_knots);
        c.network.set_flat_parameters(r.f64s(c.network.parameter_count()));
        if (r.remaining() != 0) throw std::runtime_error("checkpoint has trailing bytes");
        c.hash = to_hex(stored);
        c.validate();
        return c;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint " + path);
        const auto bytes = serialize();
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }

    static PolicyCheckpoint load(const std::string& path) { return deserialize(read_binary_file(path)); }
};

/// Black-box adapter over a checkpoint: distribution = softmax(Q-row / alpha),
/// features = last hidden layer.
class NetworkPolicy final : public PolicySnapshot {
public:
    explicit NetworkPolicy(PolicyCheckpoint ckpt) : ckpt_(std::move(ckpt)) {}

    std::size_t num_actions() const override { return ckpt_.network.output_dim(); }
    ActionDistribution distribution(std::span<const double> obs) const override {
        return softmax_policy(ckpt_.network.q_values(obs), ckpt_.config.alpha);
    }
    std::optional<std::vector<double>> q_row(std::span<const double> obs) const override {
        return ckpt_.network.q_values(obs);
    }
    std::optional<std::vector<double>> features(std::span<const double> obs) const override {
        return ckpt_.network.features(obs);
    }
    std::string id() const override { return ckpt_.hash; }

    const PolicyCheckpoint& checkpoint() const noexcept { return ckpt_; }

private:
    PolicyCheckpoint ckpt_;
};

inline std::shared_ptr<const NetworkPolicy> policy_from_checkpoint(PolicyCheckpoint ckpt) {
    ckpt.validate();
    return std::make_shared<const NetworkPolicy>(std::move(ckpt));
}

struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainMetrics {
    std::size_t iteration = 0;
    double average_reward = 0.0;  // per environment step over the window
    double crash_rate = 0.0;      // crashes per environment step over the window
    double td_loss = 0.0;         // mean over gradient steps in the window
};

inline void to_json(nlohmann::json& j, const TrainMetrics& m) {
    j = {{"iteration", m.iteration}, {"average_reward", m.average_reward}, {"crash_rate", m.crash_rate}, {"td_loss", m.td_loss}};
}

struct TrainResult {
    PolicyCheckpoint checkpoint;
    std::vector<TrainMetrics> metrics;
};

namespace detail {

class Optimizer {
public:
    Optimizer(const QNetwork& net, const TrainConfig& cfg) : kind_(cfg.optimizer), lr_(cfg.learning_rate) {
        if (kind_ == OptimizerKind::adam) {
            for (std::size_t l = 0; l < net.num_layers(); ++l) {
                mw_.push_back(Eigen::MatrixXd::Zero(net.weights()[l].rows(), net.weights()[l].cols()));
                vw_.push_back(mw_.back());
                mb_.push_back(Eigen::VectorXd::Zero(net.biases()[l].size()));
                vb_.push_back(mb_.back());
            }
        }
    }

    void step(QNetwork& net, const QNetwork::Gradient& g) {
        if (kind_ == OptimizerKind::sgd) {
            net.apply_gradient(g, lr_);
            return;
        }
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++t_;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t l = 0; l < net.num_layers(); ++l) {
            mw_[l] = b1 * mw_[l] + (1 - b1) * g.weights[l];
            vw_[l] = b2 * vw_[l] + (1 - b2) * g.weights[l].cwiseProduct(g.weights[l]);
            mb_[l] = b1 * mb_[l] + (1 - b1) * g.biases[l];
            vb_[l] = b2 * vb_[l] + (1 - b2) * g.biases[l].cwiseProduct(g.biases[l]);
            net.mutable_weights()[l].array() -= lr_ * (mw_[l].array() / c1) / ((vw_[l].array() / c2).sqrt() + eps);
            net.mutable_biases()[l].array() -= lr_ * (mb_[l].array() / c1) / ((vb_[l].array() / c2).sqrt() + eps);
        }
    }

private:
    OptimizerKind kind_;
    double lr_;
    std::size_t t_ = 0;
    std::vector<Eigen::MatrixXd> mw_, vw_;
    std::vector<Eigen::VectorXd> mb_, vb_;
};

}  // namespace detail

/// Soft Bellman regression targets r + gamma (1 - done) alpha ln sum exp(Q_target(s') / alpha).
inline Eigen::VectorXd soft_targets(const QNetwork& target, const ReplayBuffer& buffer,
                                    std::span<const std::size_t> idx, double alpha, double discount) {
    const std::size_t dim = target.input_dim();
    Eigen::MatrixXd next(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& t = buffer.at(idx[i]);
        next.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::VectorXd>(t.next_observation.data(), static_cast<Eigen::Index>(dim));
    }
    const Eigen::MatrixXd qn = target.forward(next);
    Eigen::VectorXd y(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& t = buffer.at(idx[i]);
        const auto col = static_cast<Eigen::Index>(i);
        const Eigen::VectorXd qcol = qn.col(col);
        const double v = soft_max_value(std::span<const double>(qcol.data(), static_cast<std::size_t>(qcol.size())), alpha);
        y(col) = t.reward + (t.done ? 0.0 : discount * v);
    }
    return y;
}

/// Sampled soft Q-learning with replay and a periodically synced target network.
/// The behavior policy is the softmax of the current Q at temperature alpha.
inline TrainResult train_soft_q(Environment& env, const TrainConfig& cfg,
                                const nlohmann::json& env_config = nlohmann::json::object(),
                                const std::function<void(const TrainMetrics&)>& on_metrics = {}) {
    cfg.validate();
    const EnvSpec spec = env.spec();
    std::vector<std::size_t> sizes{spec.observation_dim};
    sizes.insert(sizes.end(), cfg.hidden_layers.begin(), cfg.hidden_layers.end());
    sizes.push_back(spec.n_actions);

    QNetwork net(sizes, derive_seed(cfg.seed, 10), cfg.basis_knots);
    QNetwork target = net;
    detail::Optimizer opt(net, cfg);
    ReplayBuffer buffer(cfg.replay_capacity);
    Rng behavior(derive_seed(cfg.seed, 11));
    Rng batch_rng(derive_seed(cfg.seed, 12));

    std::size_t episode = 0;
    std::vector<double> obs = env.reset(derive_seed(cfg.seed, 1));
    std::vector<TrainMetrics> metrics;
    double win_reward = 0.0, win_loss = 0.0;
    std::size_t win_crashes = 0, win_steps = 0, win_updates = 0;

    Eigen::MatrixXd x(static_cast<Eigen::Index>(spec.observation_dim), static_cast<Eigen::Index>(cfg.batch_size));
    std::vector<std::size_t> actions(cfg.batch_size);
    QNetwork::Gradient grad;

    std::size_t step = 0;
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        for (std::size_t k = 0; k < cfg.steps_per_iteration; ++k) {
            ++step;
            const auto dist = softmax_policy(net.q_values(obs), cfg.alpha);
            const std::size_t a = behavior.categorical(dist.probabilities());
            StepResult r = env.step(a);
            win_reward += r.reward;
            win_crashes += r.crashed ? 1 : 0;
            ++win_steps;
            buffer.push({obs, a, r.reward, r.observation, r.done});
            if (r.done) {
                ++episode;
                obs = env.reset(derive_seed(cfg.seed, 1 + 1000003ULL * episode));
            } else {
                obs = std::move(r.observation);
            }

            if (buffer.size() >= std::max(cfg.batch_size, cfg.warmup)) {
                const auto idx = buffer.sample(cfg.batch_size, batch_rng);
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const auto& t = buffer.at(idx[i]);
                    x.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::VectorXd>(t.observation.data(), static_cast<Eigen::Index>(spec.observation_dim));
                    actions[i] = t.action;
                }
                const Eigen::VectorXd y = soft_targets(target, buffer, idx, cfg.alpha, cfg.discount);
                const double loss = net.td_loss(x, actions, y, &grad);
                if (!std::isfinite(loss) || loss > 1e6)
                    throw TrainingDiverged("train_soft_q: TD loss diverged at iteration " + std::to_string(it));
                opt.step(net, grad);
                if (!net.finite())
                    throw TrainingDiverged("train_soft_q: non-finite parameters at iteration " + std::to_string(it));
                win_loss += loss;
                ++win_updates;
            }
            if (step % cfg.target_update_period == 0) target = net;
        }

        if (it % 1000 == 0 || it == cfg.iterations) {
            TrainMetrics m{it, win_reward / static_cast<double>(win_steps),
                           static_cast<double>(win_crashes) / static_cast<double>(win_steps),
                           win_updates ? win_loss / static_cast<double>(win_updates) : 0.0};
            metrics.push_back(m);
            if (on_metrics) on_metrics(m);
            win_reward = win_loss = 0.0;
            win_crashes = win_steps = win_updates = 0;
        }
    }

    PolicyCheckpoint ckpt;
    ckpt.env_name = env.name();
    ckpt.env_config = env_config;
    ckpt.action_grid = env.action_values();
    ckpt.network = std::move(net);
    ckpt.config = cfg;
    ckpt.iterations_trained = cfg.iterations;
    ckpt.seal();
    return {std::move(ckpt), std::move(metrics)};
}

// Evaluation -------------------------------------------------------------------

struct SeedMetrics {
    std::uint64_t seed = 0;
    double return_per_step = 0.0;
    double crashes_per_step = 0.0;
    std::size_t crashes = 0;
};

struct EvalMetrics {
    std::size_t steps_per_seed = 0;
    std::vector<SeedMetrics> per_seed;
    double mean_return_per_step = 0.0, stderr_return_per_step = 0.0;
    double mean_crashes_per_step = 0.0, stderr_crashes_per_step = 0.0;
    std::vector<std::size_t> entropy_histogram;  // equal-width bins over [0, ln n]
};

inline void to_json(nlohmann::json& j, const EvalMetrics& m) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& s : m.per_seed)
        seeds.push_back({{"seed", s.seed}, {"return_per_step", s.return_per_step},
                         {"crashes_per_step", s.crashes_per_step}, {"crashes", s.crashes}});
    j = {{"steps_per_seed", m.steps_per_seed},
         {"per_seed", seeds},
         {"mean_return_per_step", m.mean_return_per_step},
         {"stderr_return_per_step", m.stderr_return_per_step},
         {"mean_crashes_per_step", m.mean_crashes_per_step},
         {"stderr_crashes_per_step", m.stderr_crashes_per_step},
         {"entropy_histogram", m.entropy_histogram}};
}

namespace detail {

inline std::pair<double, double> mean_stderr(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    if (xs.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

}  // namespace detail

/// On-policy evaluation over `n_seeds` independent rollouts of `n_steps` each.
/// Seed i uses derive_seed(base_seed, i).
inline EvalMetrics evaluate(const PolicySnapshot& policy, const Environment& env_proto, std::size_t n_steps,
                            std::size_t n_seeds = 1, std::uint64_t base_seed = 0, std::size_t histogram_bins = 10) {
    if (n_steps == 0) throw std::invalid_argument("evaluate: n_steps must be positive");
    if (n_seeds == 0) throw std::invalid_argument("evaluate: n_seeds must be positive");
    EvalMetrics m;
    m.steps_per_seed = n_steps;
    m.entropy_histogram.assign(histogram_bins, 0);
    const double max_h = std::log(static_cast<double>(policy.num_actions()));
    std::vector<double> returns, crashes;
    for (std::size_t i = 0; i < n_seeds; ++i) {
        const std::uint64_t seed = derive_seed(base_seed, i);
        auto env = env_proto.clone();
        RolloutCursor cursor(*env, policy, seed);
        double total = 0.0;
        std::size_t n_crash = 0;
        for (std::size_t t = 0; t < n_steps; ++t) {
            const auto dist = cursor.distribution();
            if (histogram_bins > 0) {
                const double h = max_h > 0 ? entropy(dist) / max_h : 0.0;
                const auto bin = std::min(histogram_bins - 1, static_cast<std::size_t>(h * static_cast<double>(histogram_bins)));
                ++m.entropy_histogram[bin];
            }
            const auto r = cursor.apply(cursor.sample(dist));
            total += r.reward;
            n_crash += r.crashed ? 1 : 0;
        }
        const double steps = static_cast<double>(n_steps);
        m.per_seed.push_back({seed, total / steps, static_cast<double>(n_crash) / steps, n_crash});
        returns.push_back(total / steps);
        crashes.push_back(static_cast<double>(n_crash) / steps);
    }
    std::tie(m.mean_return_per_step, m.stderr_return_per_step) = detail::mean_stderr(returns);
    std::tie(m.mean_crashes_per_step, m.stderr_crashes_per_step) = detail::mean_stderr(crashes);
    return m;
}

}  // namespace critstate
