#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "critstate/config.hpp"
#include "critstate/envs/registry.hpp"
#include "critstate/soft_q.hpp"
#include "support/oracles.hpp"

using namespace critstate;

namespace {

// Independent hat interpolation: linear between knot values at evenly spaced
// positions on the action index axis.
oracle::Vec interpolate(const oracle::Vec& knot_values, std::size_t n_actions) {
    const std::size_t k = knot_values.size();
    oracle::Vec out(n_actions);
    for (std::size_t i = 0; i < n_actions; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(n_actions - 1);
        const double pos = u * static_cast<double>(k - 1);
        std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        if (lo >= k - 1) lo = k - 2;
        const double t = pos - static_cast<double>(lo);
        out[i] = (1.0 - t) * knot_values[lo] + t * knot_values[lo + 1];
    }
    return out;
}

struct Batch {
    Eigen::MatrixXd x;
    std::vector<std::size_t> actions;
    Eigen::VectorXd y;
};

Batch random_batch(std::size_t in, std::size_t n_actions, std::size_t b, std::uint64_t seed) {
    Rng rng(seed);
    Batch out{Eigen::MatrixXd(in, b), std::vector<std::size_t>(b), Eigen::VectorXd(b)};
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < in; ++j) out.x(j, i) = rng.uniform(-1.0, 1.0);
        out.actions[i] = rng.index(n_actions);
        out.y(i) = rng.uniform(-1.0, 1.0);
    }
    return out;
}

double oracle_loss(const std::vector<std::size_t>& trainable, std::size_t n_actions, bool knots,
                   const oracle::Vec& params, const Batch& b) {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < b.x.cols(); ++i) {
        oracle::Vec in(b.x.rows());
        for (Eigen::Index j = 0; j < b.x.rows(); ++j) in[j] = b.x(j, i);
        oracle::Vec q = oracle::mlp_forward(trainable, params, in);
        if (knots) q = interpolate(q, n_actions);
        const double e = q[b.actions[i]] - b.y(i);
        loss += e * e;
    }
    return loss / (2.0 * static_cast<double>(b.x.cols()));
}

std::vector<double> flatten(const QNetwork::Gradient& g) {
    std::vector<double> out;
    for (std::size_t l = 0; l < g.weights.size(); ++l) {
        for (Eigen::Index r = 0; r < g.weights[l].rows(); ++r)
            for (Eigen::Index c = 0; c < g.weights[l].cols(); ++c) out.push_back(g.weights[l](r, c));
        for (Eigen::Index r = 0; r < g.biases[l].size(); ++r) out.push_back(g.biases[l](r));
    }
    return out;
}

double max_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1e-8, std::abs(a[i]) + std::abs(b[i])));
    return worst;
}

PolicyCheckpoint small_checkpoint() {
    auto env = make_env("chain");
    TrainConfig cfg;
    cfg.iterations = 200;
    cfg.hidden_layers = {8};
    return train_soft_q(*env, cfg, {{"discount", 0.9}}).checkpoint;
}

}  // namespace

TEST(QNetwork, ForwardMatchesOracle) {
    const QNetwork net({3, 5, 4, 2}, 7);
    const std::vector<double> obs{0.2, -0.4, 0.9};
    const auto q = net.q_values(obs);
    const auto ref = oracle::mlp_forward({3, 5, 4, 2}, net.flat_parameters(), obs);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(q[i], ref[i], 1e-14);
}

TEST(QNetwork, GradientMatchesFiniteDifferences) {
    const Batch b = random_batch(2, 3, 6, 11);
    const QNetwork net({2, 4, 3}, 3);
    QNetwork::Gradient g;
    const double loss = net.td_loss(b.x, b.actions, b.y, &g);
    const auto params = net.flat_parameters();
    EXPECT_NEAR(loss, oracle_loss({2, 4, 3}, 3, false, params, b), 1e-14);
    const auto fd = oracle::central_difference(
        [&](const oracle::Vec& p) { return oracle_loss({2, 4, 3}, 3, false, p, b); }, params, 1e-6);
    EXPECT_LT(max_relative_error(flatten(g), fd), 1e-4);
}

TEST(QNetwork, GradientMatchesFiniteDifferencesWithHatBasis) {
    const Batch b = random_batch(2, 7, 8, 12);
    const QNetwork net({2, 4, 7}, 4, 3);
    QNetwork::Gradient g;
    net.td_loss(b.x, b.actions, b.y, &g);
    const auto params = net.flat_parameters();
    ASSERT_EQ(params.size(), 2u * 4u + 4u + 4u * 3u + 3u);
    const auto fd = oracle::central_difference(
        [&](const oracle::Vec& p) { return oracle_loss({2, 4, 3}, 7, true, p, b); }, params, 1e-6);
    EXPECT_LT(max_relative_error(flatten(g), fd), 1e-4);
}

TEST(QNetwork, HatBasisRowsInterpolateKnots) {
    const Eigen::MatrixXd basis = hat_basis(200, 5);
    const oracle::Vec knots{1.0, -2.0, 0.5, 3.0, 0.0};
    const auto ref = interpolate(knots, 200);
    Eigen::VectorXd kv(5);
    for (int i = 0; i < 5; ++i) kv(i) = knots[i];
    const Eigen::VectorXd q = basis * kv;
    for (int i = 0; i < 200; ++i) {
        EXPECT_NEAR(q(i), ref[i], 1e-12);
        EXPECT_NEAR(basis.row(i).sum(), 1.0, 1e-12);
    }
    EXPECT_EQ(q(0), 1.0);
    EXPECT_EQ(q(199), 0.0);
    EXPECT_THROW(hat_basis(200, 1), std::invalid_argument);
}

TEST(QNetwork, FlatParametersRoundTrip) {
    QNetwork a({4, 6, 3}, 1), b({4, 6, 3}, 2);
    b.set_flat_parameters(a.flat_parameters());
    EXPECT_EQ(a, b);
    EXPECT_THROW(b.set_flat_parameters(std::vector<double>(3)), std::invalid_argument);
}

TEST(QNetwork, RejectsBadShapes) {
    EXPECT_THROW(QNetwork({4}, 1), std::invalid_argument);
    EXPECT_THROW(QNetwork({4, 0, 2}, 1), std::invalid_argument);
    const QNetwork net({2, 3}, 1);
    EXPECT_THROW(net.q_values(std::vector<double>{1.0}), std::invalid_argument);
    const Batch b = random_batch(2, 3, 4, 1);
    EXPECT_THROW(net.td_loss(b.x, std::vector<std::size_t>{0, 1}, b.y), std::invalid_argument);
}

TEST(ReplayBuffer, KeepsTheNewestInOrder) {
    ReplayBuffer buf(3);
    for (std::size_t i = 0; i < 5; ++i) buf.push({{static_cast<double>(i)}, i, 0.0, {}, false});
    ASSERT_EQ(buf.size(), 3u);
    EXPECT_EQ(buf.at(0).action, 2u);
    EXPECT_EQ(buf.at(2).action, 4u);
    EXPECT_THROW(buf.at(3), std::out_of_range);
    Rng rng(1);
    for (std::size_t i : buf.sample(100, rng)) EXPECT_LT(i, 3u);
    EXPECT_THROW(ReplayBuffer(0), std::invalid_argument);
    EXPECT_THROW(ReplayBuffer(2).sample(1, rng), std::logic_error);
}

TEST(Checkpoint, SerializeRoundTrip) {
    const PolicyCheckpoint c = small_checkpoint();
    const auto bytes = c.serialize();
    const PolicyCheckpoint back = PolicyCheckpoint::deserialize(bytes);
    EXPECT_EQ(back.hash, c.hash);
    EXPECT_EQ(back.network, c.network);
    EXPECT_EQ(back.env_name, "chain");
    EXPECT_EQ(back.env_config, c.env_config);
    EXPECT_EQ(back.action_grid, c.action_grid);
    EXPECT_EQ(back.serialize(), bytes);

    const auto path = std::filesystem::temp_directory_path() / "critstate_ckpt_test.ckpt";
    c.save(path.string());
    EXPECT_EQ(PolicyCheckpoint::load(path.string()).hash, c.hash);
    std::filesystem::remove(path);
}

TEST(Checkpoint, TamperingIsDetected) {
    const auto bytes = small_checkpoint().serialize();
    for (std::size_t pos : {std::size_t{0}, bytes.size() / 2, bytes.size() - 40, bytes.size() - 1}) {
        auto bad = bytes;
        bad[pos] ^= 0x01;
        EXPECT_THROW(PolicyCheckpoint::deserialize(bad), std::runtime_error) << "byte " << pos;
    }
    EXPECT_THROW(PolicyCheckpoint::deserialize(std::vector<std::uint8_t>(10)), std::runtime_error);
}

TEST(Checkpoint, PolicyAdapterUsesHashAsId) {
    const auto policy = policy_from_checkpoint(small_checkpoint());
    EXPECT_EQ(policy->id().size(), 64u);
    const auto obs = one_hot(2, 0);
    EXPECT_EQ(policy->distribution(obs), softmax_policy(*policy->q_row(obs), policy->checkpoint().config.alpha));
    EXPECT_EQ(policy->features(obs)->size(), 8u);
}

TEST(Training, DeterministicForASeed) {
    const PolicyCheckpoint a = small_checkpoint(), b = small_checkpoint();
    EXPECT_EQ(a.hash, b.hash);
    auto env = make_env("chain");
    TrainConfig cfg;
    cfg.iterations = 200;
    cfg.hidden_layers = {8};
    cfg.seed = 2;
    EXPECT_NE(train_soft_q(*env, cfg).checkpoint.hash, a.hash);
}

TEST(Training, TrainConfigValidation) {
    TrainConfig cfg;
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_THROW((nlohmann::json{{"optimizer", "rmsprop"}}.get<TrainConfig>()), std::invalid_argument);
    const TrainConfig back = nlohmann::json(TrainConfig{}).get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(TrainConfig{}));
}

TEST(Training, MetricsEveryThousandIterations) {
    auto env = make_env("chain");
    TrainConfig cfg;
    cfg.iterations = 2500;
    cfg.hidden_layers = {8};
    std::size_t calls = 0;
    const auto result = train_soft_q(*env, cfg, {}, [&](const TrainMetrics&) { ++calls; });
    ASSERT_EQ(result.metrics.size(), 3u);
    EXPECT_EQ(calls, 3u);
    EXPECT_EQ(result.metrics.back().iteration, 2500u);
}

TEST(Training, ChainPresetRecoversSoftOptimalQ) {
    const RunConfig rc = layered_config("chain", {});
    auto env = make_env("chain", rc.env_config);
    const auto result = train_soft_q(*env, rc.train, rc.env_config);
    ASSERT_LE(rc.train.iterations, 20'000u);

    const auto& mdp = static_cast<const TabularEnv&>(*env).mdp();
    oracle::Mdp m;
    m.ns = 2;
    m.na = 2;
    m.gamma = mdp.discount();
    m.p.assign(2, oracle::Mat(2, oracle::Vec(2)));
    m.r = m.p;
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t t = 0; t < 2; ++t) {
                m.p[s][a][t] = mdp.transition(s, a, t);
                m.r[s][a][t] = mdp.reward(s, a, t);
            }
    const auto q_star = oracle::soft_q_by_policy_iteration(m, rc.train.alpha);
    double err = 0.0;
    for (std::size_t s = 0; s < 2; ++s) {
        const auto q = result.checkpoint.network.q_values(one_hot(2, s));
        for (std::size_t a = 0; a < 2; ++a) err = std::max(err, std::abs(q[a] - q_star[s][a]));
    }
    EXPECT_LT(err, 0.05);
}

TEST(Evaluation, StandardErrorAcrossSeeds) {
    auto env = make_env("chain");
    const UniformPolicy pol(2);
    const EvalMetrics m = evaluate(pol, *env, 1000, 4, 3);
    ASSERT_EQ(m.per_seed.size(), 4u);
    double mean = 0.0;
    for (const auto& s : m.per_seed) mean += s.return_per_step;
    EXPECT_NEAR(m.mean_return_per_step, mean / 4.0, 1e-15);
    EXPECT_NEAR(m.mean_return_per_step, 0.5, 0.05);
    EXPECT_GT(m.stderr_return_per_step, 0.0);
    std::size_t total = 0;
    for (std::size_t c : m.entropy_histogram) total += c;
    EXPECT_EQ(total, 4000u);
    EXPECT_EQ(m.entropy_histogram.back(), 4000u);
    EXPECT_THROW(evaluate(pol, *env, 0), std::invalid_argument);
}
