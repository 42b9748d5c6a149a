#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/env.hpp"
#include "critstate/mdp.hpp"
#include "critstate/policy.hpp"
#include "critstate/rng.hpp"

namespace critstate {

/// Two-state chain used as the small learning benchmark. Action 0 ("advance")
/// moves to state 1 and pays 1; action 1 ("back") returns to state 0 and pays 0.
/// Under the hard optimality criterion the action gap at every state is 1.
inline TabularMDP chain_mdp(double discount = 0.9) {
    return TabularMDP::deterministic({{1, 0}, {1, 0}}, {{1.0, 0.0}, {1.0, 0.0}}, discount);
}

/// Random dense MDP for oracle comparisons. Rewards uniform in [-1, 1].
inline TabularMDP random_mdp(std::size_t n_states, std::size_t n_actions, double discount, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> p(n_states * n_actions * n_states), r(p.size());
    for (std::size_t sa = 0; sa < n_states * n_actions; ++sa) {
        double sum = 0.0;
        for (std::size_t t = 0; t < n_states; ++t) {
            p[sa * n_states + t] = rng.uniform() + 1e-3;
            sum += p[sa * n_states + t];
        }
        for (std::size_t t = 0; t < n_states; ++t) {
            p[sa * n_states + t] /= sum;
            r[sa * n_states + t] = rng.uniform(-1.0, 1.0);
        }
    }
    return TabularMDP(n_states, n_actions, std::move(p), std::move(r), discount);
}

/// Continuing environment that samples a TabularMDP. Observations are one-hot
/// state vectors; episodes never terminate.
class TabularEnv final : public Environment {
public:
    explicit TabularEnv(TabularMDP mdp, std::string name = "tabular", std::size_t start_state = 0)
        : mdp_(std::move(mdp)), name_(std::move(name)), start_(start_state) {
        if (start_ >= mdp_.n_states()) throw std::out_of_range("TabularEnv: start state out of range");
        state_ = start_;
    }

    const TabularMDP& mdp() const noexcept { return mdp_; }
    std::size_t state_index() const noexcept { return state_; }
    void set_state(std::size_t s) {
        if (s >= mdp_.n_states()) throw std::out_of_range("TabularEnv: state out of range");
        state_ = s;
    }

    std::string name() const override { return name_; }
    EnvSpec spec() const override { return {mdp_.n_states(), mdp_.n_actions(), std::nullopt, 0, 0}; }

    std::vector<double> reset(std::uint64_t seed) override {
        rng_ = Rng(seed);
        state_ = start_;
        return observation();
    }

    std::vector<double> observation() const override { return one_hot(mdp_.n_states(), state_); }

    StepResult step(std::size_t action) override {
        if (action >= mdp_.n_actions()) throw std::out_of_range("TabularEnv: action out of range");
        const std::size_t next = rng_.categorical(mdp_.transition_row(state_, action));
        const double r = mdp_.reward(state_, action, next);
        state_ = next;
        return {observation(), r, false, false};
    }

    std::unique_ptr<Environment> clone() const override { return std::make_unique<TabularEnv>(*this); }
    void reseed(std::uint64_t seed) override { rng_ = Rng(seed); }

    std::vector<double> action_values() const override {
        std::vector<double> v(mdp_.n_actions());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
        return v;
    }

    nlohmann::json scene() const override {
        using nlohmann::json;
        json ents = json::array();
        const double n = static_cast<double>(mdp_.n_states());
        for (std::size_t s = 0; s < mdp_.n_states(); ++s) {
            const bool here = s == state_;
            ents.push_back({{"kind", "circle"},
                            {"role", here ? "current" : "state"},
                            {"x", (static_cast<double>(s) + 0.5) / n},
                            {"y", 0.5},
                            {"radius", 0.3 / n},
                            {"color", here ? json{240, 200, 40} : json{120, 120, 120}}});
        }
        return {{"env", name_},
                {"view", {{"x0", 0.0}, {"y0", 0.0}, {"x1", 1.0}, {"y1", 1.0}}},
                {"background", {20, 20, 20}},
                {"entities", ents}};
    }

    bool scripted_critical() const override { return false; }

private:
    TabularMDP mdp_;
    std::string name_;
    std::size_t start_;
    std::size_t state_ = 0;
    Rng rng_{0};
};

}  // namespace critstate
