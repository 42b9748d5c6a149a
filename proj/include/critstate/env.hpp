#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace critstate {

struct EnvSpec {
    std::size_t observation_dim = 0;
    std::size_t n_actions = 0;                                // discrete action count seen by learners
    std::optional<std::pair<double, double>> continuous_range;  // set when actions discretize an interval
    std::size_t step_limit = 0;                               // 0 = no limit
    std::uint64_t seed = 0;
};

struct StepResult {
    std::vector<double> observation;
    double reward = 0.0;
    bool done = false;     // terminal; the next step needs a reset
    bool crashed = false;  // counted failure; may or may not end the episode
};

/// Discrete-action, seedable environment. Instances are single-session;
/// copies made with clone() are fully independent.
class Environment {
public:
    virtual ~Environment() = default;

    virtual std::string name() const = 0;
    virtual EnvSpec spec() const = 0;

    virtual std::vector<double> reset(std::uint64_t seed) = 0;
    virtual std::vector<double> observation() const = 0;
    virtual StepResult step(std::size_t action) = 0;

    virtual std::unique_ptr<Environment> clone() const = 0;

    /// Replaces the internal random stream without touching the state, so a
    /// clone can be used for independent one-step samples.
    virtual void reseed(std::uint64_t seed) = 0;

    /// Physical value of each discrete action (grid point, or a symbolic code).
    virtual std::vector<double> action_values() const = 0;

    /// Entity-level description of the current state for renderers.
    virtual nlohmann::json scene() const = 0;

    /// Built-in scripted critical-state rule for the current state.
    virtual bool scripted_critical() const = 0;
};

using EnvPtr = std::unique_ptr<Environment>;

}  // namespace critstate
