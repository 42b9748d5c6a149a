#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "critstate/mdp.hpp"

namespace critstate {

/// Black-box view of a policy. Only the action distribution is mandatory;
/// Q-rows and hidden-layer features are exposed when the implementation has
/// them. Implementations are immutable after construction.
class PolicySnapshot {
public:
    virtual ~PolicySnapshot() = default;

    virtual std::size_t num_actions() const = 0;
    virtual ActionDistribution distribution(std::span<const double> observation) const = 0;

    virtual std::optional<std::vector<double>> q_row(std::span<const double>) const { return std::nullopt; }
    virtual std::optional<std::vector<double>> features(std::span<const double>) const { return std::nullopt; }

    /// Identifies the policy in decks, logs and reports.
    virtual std::string id() const = 0;
};

using PolicyPtr = std::shared_ptr<const PolicySnapshot>;

/// Index of the hot entry of a one-hot observation.
inline std::size_t one_hot_index(std::span<const double> observation) {
    for (std::size_t i = 0; i < observation.size(); ++i)
        if (observation[i] == 1.0) return i;
    throw std::invalid_argument("observation is not one-hot");
}

inline std::vector<double> one_hot(std::size_t n, std::size_t hot) {
    std::vector<double> v(n, 0.0);
    v.at(hot) = 1.0;
    return v;
}

/// Softmax policy over a Q table. Observations are one-hot state vectors.
class TabularPolicy final : public PolicySnapshot {
public:
    TabularPolicy(Matrix q, double alpha, std::string id = "tabular")
        : q_(std::move(q)), alpha_(alpha), id_(std::move(id)) {
        if (!(alpha_ > 0.0)) throw std::invalid_argument("TabularPolicy: alpha must be positive");
    }

    std::size_t num_actions() const override { return q_.cols(); }

    ActionDistribution distribution(std::span<const double> observation) const override {
        return softmax_policy(q_.row(state_of(observation)), alpha_);
    }

    std::optional<std::vector<double>> q_row(std::span<const double> observation) const override {
        const auto row = q_.row(state_of(observation));
        return std::vector<double>(row.begin(), row.end());
    }

    std::string id() const override { return id_; }
    const Matrix& q() const noexcept { return q_; }

private:
    std::size_t state_of(std::span<const double> observation) const {
        if (observation.size() != q_.rows()) throw std::invalid_argument("TabularPolicy: observation size mismatch");
        return one_hot_index(observation);
    }

    Matrix q_;
    double alpha_;
    std::string id_;
};

/// Uniform over a fixed number of actions regardless of state.
class UniformPolicy final : public PolicySnapshot {
public:
    explicit UniformPolicy(std::size_t n_actions) : n_(n_actions) {
        if (n_ == 0) throw std::invalid_argument("UniformPolicy: no actions");
    }
    std::size_t num_actions() const override { return n_; }
    ActionDistribution distribution(std::span<const double>) const override {
        return ActionDistribution::uniform(n_);
    }
    std::optional<std::vector<double>> q_row(std::span<const double>) const override {
        return std::vector<double>(n_, 0.0);
    }
    std::string id() const override { return "uniform-" + std::to_string(n_); }

private:
    std::size_t n_;
};

}  // namespace critstate
