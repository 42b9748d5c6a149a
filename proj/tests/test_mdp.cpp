#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "critstate/envs/tabular.hpp"
#include "critstate/mdp.hpp"
#include "support/oracles.hpp"

using namespace critstate;

namespace {

oracle::Mdp to_oracle(const TabularMDP& m) {
    oracle::Mdp o;
    o.ns = m.n_states();
    o.na = m.n_actions();
    o.gamma = m.discount();
    o.p.assign(o.ns, oracle::Mat(o.na, oracle::Vec(o.ns)));
    o.r = o.p;
    for (std::size_t s = 0; s < o.ns; ++s)
        for (std::size_t a = 0; a < o.na; ++a)
            for (std::size_t t = 0; t < o.ns; ++t) {
                o.p[s][a][t] = m.transition(s, a, t);
                o.r[s][a][t] = m.reward(s, a, t);
            }
    return o;
}

TabularMDP single_state(std::size_t n_actions, double reward, double gamma) {
    std::vector<std::vector<std::size_t>> next{std::vector<std::size_t>(n_actions, 0)};
    std::vector<std::vector<double>> r{std::vector<double>(n_actions, reward)};
    return TabularMDP::deterministic(next, r, gamma);
}

}  // namespace

TEST(SoftValueIteration, MatchesPolicyIterationOracleOnRandomMdps) {
    for (double alpha : {0.1, 1.0}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const TabularMDP mdp = random_mdp(5, 3, 0.9, 1000 + seed);
            MaxEntConfig cfg;
            cfg.alpha = alpha;
            const SoftSolution sol = soft_value_iteration(mdp, cfg);
            const oracle::Mat q = oracle::soft_q_by_policy_iteration(to_oracle(mdp), alpha);
            double err = 0.0;
            for (std::size_t s = 0; s < 5; ++s)
                for (std::size_t a = 0; a < 3; ++a) err = std::max(err, std::abs(sol.values.q(s, a) - q[s][a]));
            EXPECT_LT(err, 1e-6) << "seed " << seed << " alpha " << alpha;
        }
    }
}

TEST(SoftValueIteration, TwoEqualZeroRewardActionsGiveClosedForm) {
    for (double alpha : {0.1, 0.5, 1.0, 2.0}) {
        MaxEntConfig cfg;
        cfg.alpha = alpha;
        cfg.tolerance = 1e-13;
        const SoftSolution sol = soft_value_iteration(single_state(2, 0.0, 0.9), cfg);
        EXPECT_NEAR(sol.values.v[0], alpha * std::numbers::ln2 / (1.0 - 0.9), 1e-9);
        EXPECT_DOUBLE_EQ(sol.policy[0][0], 0.5);
    }
}

TEST(SoftValueIteration, FixedPointOfTheBackup) {
    const TabularMDP mdp = random_mdp(4, 2, 0.8, 7);
    MaxEntConfig cfg;
    cfg.alpha = 0.3;
    const SoftSolution sol = soft_value_iteration(mdp, cfg);
    EXPECT_LT(sup_norm_diff(soft_bellman_backup(mdp, sol.values.q, cfg), sol.values.q), 1e-8);
}

TEST(SoftValueIteration, PolicyIsSoftmaxOfQ) {
    const TabularMDP mdp = random_mdp(3, 4, 0.9, 3);
    MaxEntConfig cfg;
    cfg.alpha = 0.5;
    const SoftSolution sol = soft_value_iteration(mdp, cfg);
    for (std::size_t s = 0; s < 3; ++s) {
        double z = 0.0;
        for (std::size_t a = 0; a < 4; ++a) z += std::exp(sol.values.q(s, a) / cfg.alpha);
        for (std::size_t a = 0; a < 4; ++a) EXPECT_NEAR(sol.policy[s][a], std::exp(sol.values.q(s, a) / cfg.alpha) / z, 1e-12);
        EXPECT_NEAR(sol.values.v[s], cfg.alpha * std::log(z), 1e-9);
    }
}

TEST(SoftValueIteration, SoftValueIsEntropyRegularizedReturnOfItsPolicy) {
    const TabularMDP mdp = random_mdp(4, 3, 0.9, 11);
    MaxEntConfig cfg;
    cfg.alpha = 0.7;
    const SoftSolution sol = soft_value_iteration(mdp, cfg);
    const ValueTable on_policy = evaluate_policy(mdp, sol.policy, cfg.alpha, 1e-12);
    for (std::size_t s = 0; s < 4; ++s) EXPECT_NEAR(on_policy.v[s], sol.values.v[s], 1e-6);
}

TEST(SoftValueIteration, ApproachesHardValuesAsTemperatureVanishes) {
    const TabularMDP mdp = random_mdp(4, 3, 0.9, 5);
    const Matrix hard = value_iteration(mdp);
    MaxEntConfig cfg;
    cfg.alpha = 1e-4;
    const SoftSolution sol = soft_value_iteration(mdp, cfg);
    // The soft value exceeds the hard one by at most alpha ln|A| / (1 - gamma).
    EXPECT_LT(sup_norm_diff(sol.values.q, hard), 1e-4 * std::log(3.0) / 0.1 + 1e-7);
}

TEST(SoftValueIteration, FiniteHorizonRunsExactlyThatManyBackups) {
    const TabularMDP mdp = single_state(2, 1.0, 1.0);
    MaxEntConfig cfg;
    cfg.alpha = 1.0;
    cfg.discount = 1.0;
    const SoftSolution sol = soft_value_iteration(mdp, cfg, 3);
    EXPECT_EQ(sol.iterations, 3u);
    // Q_h = 1 + V_{h-1}, V_h = Q_h + ln 2.
    EXPECT_NEAR(sol.values.q(0, 0), 3.0 + 2.0 * std::numbers::ln2, 1e-12);
}

TEST(SoftValueIteration, RejectsUndiscountedWithoutHorizon) {
    EXPECT_THROW(soft_value_iteration(single_state(2, 0.0, 1.0), MaxEntConfig{}), std::invalid_argument);
}

TEST(SoftValueIteration, RejectsNonPositiveTemperature) {
    MaxEntConfig cfg;
    cfg.alpha = 0.0;
    EXPECT_THROW(soft_value_iteration(chain_mdp(), cfg), std::invalid_argument);
}

TEST(SoftMax, StableForLargeValues) {
    const std::vector<double> q{1000.0, 1000.0};
    EXPECT_NEAR(soft_max_value(q, 1.0), 1000.0 + std::numbers::ln2, 1e-9);
    const auto p = softmax_policy(std::vector<double>{800.0, 0.0}, 0.1);
    EXPECT_DOUBLE_EQ(p[0], 1.0);
}

TEST(SoftMax, RejectsNonFiniteRows) {
    const std::vector<double> q{0.0, std::nan("")};
    EXPECT_THROW(softmax_policy(q, 1.0), std::invalid_argument);
}

TEST(Entropy, UniformIsLogN) {
    EXPECT_NEAR(entropy(ActionDistribution::uniform(200)), std::log(200.0), 1e-12);
    EXPECT_EQ(entropy(ActionDistribution::one_hot(5, 2)), 0.0);
}

TEST(ActionDistribution, ValidatesProbabilities) {
    EXPECT_THROW(ActionDistribution({0.5, 0.6}), std::invalid_argument);
    EXPECT_THROW(ActionDistribution({1.5, -0.5}), std::invalid_argument);
    EXPECT_THROW(ActionDistribution(std::vector<double>{}), std::invalid_argument);
    EXPECT_EQ(ActionDistribution({0.2, 0.4, 0.4}).argmax(), 1u);
}

TEST(TabularMdp, ValidatesTensors) {
    EXPECT_THROW(TabularMDP(1, 1, {0.5}, {0.0}, 0.9), std::invalid_argument);
    EXPECT_THROW(TabularMDP(1, 1, {1.0}, {0.0}, 1.5), std::invalid_argument);
    EXPECT_THROW(TabularMDP(1, 1, {1.0}, {std::nan("")}, 0.9), std::invalid_argument);
    EXPECT_THROW(TabularMDP(2, 1, {1.0}, {0.0}, 0.9), std::invalid_argument);
}

TEST(TabularMdp, JsonRoundTrip) {
    const TabularMDP mdp = random_mdp(3, 2, 0.95, 42);
    EXPECT_EQ(tabular_mdp_from_json(to_json(mdp)), mdp);
}

TEST(ValueIteration, ChainHasUnitActionGap) {
    const Matrix q = value_iteration(chain_mdp(0.9));
    EXPECT_NEAR(q(0, 0), 10.0, 1e-7);
    EXPECT_NEAR(q(0, 0) - q(0, 1), 1.0, 1e-7);
}

TEST(Trajectory, DiscountedReturn) {
    Trajectory t;
    t.steps = {{{0}, 0, 1.0, false}, {{1}, 0, 2.0, false}, {{0}, 1, 4.0, true}};
    EXPECT_DOUBLE_EQ(discounted_return(t, 0.5), 1.0 + 1.0 + 1.0);
    t.steps.push_back({{0}, 0, 1.0, false});
    EXPECT_THROW(discounted_return(t, 0.5), std::invalid_argument);
}
