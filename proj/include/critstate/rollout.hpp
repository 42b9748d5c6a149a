#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "critstate/env.hpp"
#include "critstate/policy.hpp"
#include "critstate/rng.hpp"

namespace critstate {

/// On-policy stepping shared by training-free consumers (state collection,
/// recordings, evaluation, live sessions) so they all see the same streams
/// for the same seed. One seed yields an environment stream and a policy
/// sampling stream; terminal steps reset the environment with a fresh
/// episode seed derived from the same root.
class RolloutCursor {
public:
    RolloutCursor(Environment& env, const PolicySnapshot& policy, std::uint64_t seed)
        : env_(&env), policy_(&policy), seed_(seed), rng_(derive_seed(seed, 2)) {
        observation_ = env_->reset(derive_seed(seed_, 1));
    }
    RolloutCursor(Environment&, const PolicySnapshot&&, std::uint64_t) = delete;

    const std::vector<double>& observation() const noexcept { return observation_; }
    Environment& env() noexcept { return *env_; }
    const Environment& env() const noexcept { return *env_; }
    const PolicySnapshot& policy() const noexcept { return *policy_; }
    const Rng& rng() const noexcept { return rng_; }
    std::size_t steps() const noexcept { return steps_; }
    std::size_t episodes() const noexcept { return episode_; }

    ActionDistribution distribution() const { return policy_->distribution(observation_); }

    /// Draws the policy's action for the current observation. Must be called
    /// exactly once per step to keep the sampling stream aligned.
    std::size_t sample(const ActionDistribution& dist) { return rng_.categorical(dist.probabilities()); }

    StepResult apply(std::size_t action) {
        StepResult r = env_->step(action);
        ++steps_;
        if (r.done) {
            ++episode_;
            observation_ = env_->reset(derive_seed(seed_, 1 + 1000003ULL * episode_));
        } else {
            observation_ = r.observation;
        }
        return r;
    }

    /// Policy-controlled step.
    StepResult step() {
        const std::size_t a = sample(distribution());
        last_action_ = a;
        return apply(a);
    }

    std::size_t last_action() const noexcept { return last_action_; }

    /// Copy of this cursor (streams included) driving another environment,
    /// typically a clone of the current one.
    RolloutCursor rebind(Environment& env) const {
        RolloutCursor c = *this;
        c.env_ = &env;
        return c;
    }

private:
    Environment* env_;
    const PolicySnapshot* policy_;
    std::uint64_t seed_;
    Rng rng_;
    std::vector<double> observation_;
    std::size_t steps_ = 0;
    std::size_t episode_ = 0;
    std::size_t last_action_ = 0;
};

}  // namespace critstate
