#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace critstate {

inline constexpr double kProbabilityTolerance = 1e-9;

/// Row-major dense matrix of doubles. Small on purpose: the tabular code only
/// needs indexed access and row views.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double sup_norm_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("sup_norm_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

/// A probability vector over a discrete action set.
class ActionDistribution {
public:
    ActionDistribution() = default;
    explicit ActionDistribution(std::vector<double> probabilities) : p_(std::move(probabilities)) {
        validate();
    }

    static ActionDistribution uniform(std::size_t n) {
        if (n == 0) throw std::invalid_argument("ActionDistribution::uniform: n must be positive");
        return ActionDistribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
    }

    static ActionDistribution one_hot(std::size_t n, std::size_t hot) {
        if (hot >= n) throw std::out_of_range("ActionDistribution::one_hot: index out of range");
        std::vector<double> p(n, 0.0);
        p[hot] = 1.0;
        return ActionDistribution(std::move(p));
    }

    std::size_t size() const noexcept { return p_.size(); }
    double operator[](std::size_t i) const { return p_[i]; }
    const std::vector<double>& probabilities() const noexcept { return p_; }

    /// Mode; ties resolve to the lowest index.
    std::size_t argmax() const {
        return static_cast<std::size_t>(std::max_element(p_.begin(), p_.end()) - p_.begin());
    }

    bool operator==(const ActionDistribution&) const = default;

private:
    void validate() const {
        if (p_.empty()) throw std::invalid_argument("ActionDistribution: empty");
        double sum = 0.0;
        for (double x : p_) {
            if (!std::isfinite(x) || x < 0.0)
                throw std::invalid_argument("ActionDistribution: negative or non-finite probability");
            sum += x;
        }
        if (std::abs(sum - 1.0) > kProbabilityTolerance)
            throw std::invalid_argument("ActionDistribution: probabilities do not sum to 1");
    }

    std::vector<double> p_;
};

/// Entropy in nats, with 0 ln 0 = 0.
inline double entropy(const ActionDistribution& dist) {
    double h = 0.0;
    for (double p : dist.probabilities())
        if (p > 0.0) h -= p * std::log(p);
    return std::max(0.0, h);
}

/// Numerically stable alpha * ln sum exp(x / alpha).
inline double soft_max_value(std::span<const double> values, double alpha) {
    if (values.empty()) throw std::invalid_argument("soft_max_value: empty row");
    const double m = *std::max_element(values.begin(), values.end());
    double s = 0.0;
    for (double v : values) s += std::exp((v - m) / alpha);
    return m + alpha * std::log(s);
}

/// p_a proportional to exp(q_a / alpha), stabilized by subtracting the row max.
inline ActionDistribution softmax_policy(std::span<const double> q_row, double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("softmax_policy: alpha must be positive");
    if (q_row.empty()) throw std::invalid_argument("softmax_policy: empty row");
    const double m = *std::max_element(q_row.begin(), q_row.end());
    if (!std::isfinite(m)) throw std::invalid_argument("softmax_policy: non-finite Q value");
    std::vector<double> p(q_row.size());
    double s = 0.0;
    for (std::size_t i = 0; i < q_row.size(); ++i) {
        if (!std::isfinite(q_row[i])) throw std::invalid_argument("softmax_policy: non-finite Q value");
        p[i] = std::exp((q_row[i] - m) / alpha);
        s += p[i];
    }
    for (double& x : p) x /= s;
    return ActionDistribution(std::move(p));
}

struct MaxEntConfig {
    double alpha = 0.1;
    double discount = 0.9;
    double tolerance = 1e-8;
    std::size_t max_iterations = 100'000;

    void validate() const {
        if (!(alpha > 0.0)) throw std::invalid_argument("MaxEntConfig: alpha must be positive");
        if (!(tolerance > 0.0)) throw std::invalid_argument("MaxEntConfig: tolerance must be positive");
        if (!(discount > 0.0 && discount <= 1.0))
            throw std::invalid_argument("MaxEntConfig: discount must be in (0, 1]");
    }
};

/// Finite MDP with explicit transition and reward tensors indexed (s, a, s').
class TabularMDP {
public:
    TabularMDP(std::size_t n_states, std::size_t n_actions, std::vector<double> transition,
               std::vector<double> reward, double discount)
        : n_states_(n_states),
          n_actions_(n_actions),
          transition_(std::move(transition)),
          reward_(std::move(reward)),
          discount_(discount) {
        validate();
    }

    /// Deterministic MDP from next-state and reward tables indexed (s, a).
    static TabularMDP deterministic(const std::vector<std::vector<std::size_t>>& next,
                                    const std::vector<std::vector<double>>& reward, double discount) {
        const std::size_t ns = next.size();
        if (ns == 0) throw std::invalid_argument("TabularMDP: no states");
        const std::size_t na = next.front().size();
        std::vector<double> p(ns * na * ns, 0.0), r(ns * na * ns, 0.0);
        for (std::size_t s = 0; s < ns; ++s) {
            if (next[s].size() != na || reward.at(s).size() != na)
                throw std::invalid_argument("TabularMDP: ragged tables");
            for (std::size_t a = 0; a < na; ++a) {
                const std::size_t s2 = next[s][a];
                if (s2 >= ns) throw std::out_of_range("TabularMDP: next state out of range");
                p[(s * na + a) * ns + s2] = 1.0;
                for (std::size_t t = 0; t < ns; ++t) r[(s * na + a) * ns + t] = reward[s][a];
            }
        }
        return TabularMDP(ns, na, std::move(p), std::move(r), discount);
    }

    std::size_t n_states() const noexcept { return n_states_; }
    std::size_t n_actions() const noexcept { return n_actions_; }
    double discount() const noexcept { return discount_; }

    double transition(std::size_t s, std::size_t a, std::size_t s2) const {
        return transition_[index(s, a, s2)];
    }
    double reward(std::size_t s, std::size_t a, std::size_t s2) const { return reward_[index(s, a, s2)]; }

    std::span<const double> transition_row(std::size_t s, std::size_t a) const {
        return {transition_.data() + (s * n_actions_ + a) * n_states_, n_states_};
    }
    std::span<const double> reward_row(std::size_t s, std::size_t a) const {
        return {reward_.data() + (s * n_actions_ + a) * n_states_, n_states_};
    }

    /// Expected immediate reward sum_{s'} P(s,a,s') R(s,a,s').
    double expected_reward(std::size_t s, std::size_t a) const {
        double r = 0.0;
        const auto p = transition_row(s, a);
        const auto rr = reward_row(s, a);
        for (std::size_t t = 0; t < n_states_; ++t) r += p[t] * rr[t];
        return r;
    }

    const std::vector<double>& transition_tensor() const noexcept { return transition_; }
    const std::vector<double>& reward_tensor() const noexcept { return reward_; }

    bool operator==(const TabularMDP&) const = default;

private:
    std::size_t index(std::size_t s, std::size_t a, std::size_t s2) const {
        return (s * n_actions_ + a) * n_states_ + s2;
    }

    void validate() const {
        if (n_states_ == 0 || n_actions_ == 0)
            throw std::invalid_argument("TabularMDP: state and action counts must be positive");
        const std::size_t n = n_states_ * n_actions_ * n_states_;
        if (transition_.size() != n || reward_.size() != n)
            throw std::invalid_argument("TabularMDP: tensor size does not match (S, A, S)");
        if (!(discount_ > 0.0 && discount_ <= 1.0))
            throw std::invalid_argument("TabularMDP: discount must be in (0, 1]");
        for (double r : reward_)
            if (!std::isfinite(r)) throw std::invalid_argument("TabularMDP: non-finite reward");
        for (std::size_t s = 0; s < n_states_; ++s)
            for (std::size_t a = 0; a < n_actions_; ++a) {
                double sum = 0.0;
                for (double p : transition_row(s, a)) {
                    if (!(p >= 0.0)) throw std::invalid_argument("TabularMDP: negative transition probability");
                    sum += p;
                }
                if (std::abs(sum - 1.0) > kProbabilityTolerance)
                    throw std::invalid_argument("TabularMDP: transition row does not sum to 1");
            }
    }

    std::size_t n_states_;
    std::size_t n_actions_;
    std::vector<double> transition_;
    std::vector<double> reward_;
    double discount_;
};

struct ValueTable {
    std::vector<double> v;
    Matrix q;
};

namespace detail {

inline void check_finite(const Matrix& q, const char* what) {
    for (double x : q.data())
        if (!std::isfinite(x)) throw std::runtime_error(std::string(what) + ": non-finite value");
}

inline void check_shape(const TabularMDP& mdp, const Matrix& q) {
    if (q.rows() != mdp.n_states() || q.cols() != mdp.n_actions())
        throw std::invalid_argument("Q table shape does not match the MDP");
}

}  // namespace detail

/// State values V(s) = alpha ln sum_a exp(Q(s,a)/alpha).
inline std::vector<double> soft_state_values(const Matrix& q, double alpha) {
    std::vector<double> v(q.rows());
    for (std::size_t s = 0; s < q.rows(); ++s) v[s] = soft_max_value(q.row(s), alpha);
    return v;
}

/// Q from state values: Q(s,a) = sum_{s'} P [R + gamma V(s')].
inline Matrix q_from_state_values(const TabularMDP& mdp, std::span<const double> v) {
    Matrix out(mdp.n_states(), mdp.n_actions());
    const double gamma = mdp.discount();
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
            const auto p = mdp.transition_row(s, a);
            const auto r = mdp.reward_row(s, a);
            double acc = 0.0;
            for (std::size_t t = 0; t < mdp.n_states(); ++t)
                if (p[t] != 0.0) acc += p[t] * (r[t] + gamma * v[t]);
            out(s, a) = acc;
        }
    return out;
}

/// One application of the soft Bellman optimality operator. The MDP's own
/// discount is used; cfg supplies the temperature.
inline Matrix soft_bellman_backup(const TabularMDP& mdp, const Matrix& q, const MaxEntConfig& cfg) {
    cfg.validate();
    detail::check_shape(mdp, q);
    detail::check_finite(q, "soft_bellman_backup input");
    Matrix out = q_from_state_values(mdp, soft_state_values(q, cfg.alpha));
    detail::check_finite(out, "soft_bellman_backup output");
    return out;
}

/// Hard (max) Bellman optimality operator.
inline Matrix bellman_backup(const TabularMDP& mdp, const Matrix& q) {
    detail::check_shape(mdp, q);
    std::vector<double> v(mdp.n_states());
    for (std::size_t s = 0; s < mdp.n_states(); ++s) {
        const auto row = q.row(s);
        v[s] = *std::max_element(row.begin(), row.end());
    }
    Matrix out = q_from_state_values(mdp, v);
    detail::check_finite(out, "bellman_backup output");
    return out;
}

/// Row-wise softmax of a Q table: the max-ent optimal policy for that Q.
inline std::vector<ActionDistribution> softmax_table(const Matrix& q, double alpha) {
    std::vector<ActionDistribution> pi;
    pi.reserve(q.rows());
    for (std::size_t s = 0; s < q.rows(); ++s) pi.push_back(softmax_policy(q.row(s), alpha));
    return pi;
}

struct SoftSolution {
    ValueTable values;
    std::vector<ActionDistribution> policy;
    std::size_t iterations = 0;
};

/// Soft value iteration from Q = 0. With `horizon` set, runs exactly that many
/// backups from zero terminal values (valid for discount 1); otherwise iterates
/// until the sup-norm change drops below cfg.tolerance.
inline SoftSolution soft_value_iteration(const TabularMDP& mdp, const MaxEntConfig& cfg,
                                         std::optional<std::size_t> horizon = std::nullopt) {
    cfg.validate();
    if (!horizon && !(mdp.discount() < 1.0))
        throw std::invalid_argument("soft_value_iteration: discount must be < 1 without a horizon");
    Matrix q(mdp.n_states(), mdp.n_actions(), 0.0);
    std::size_t it = 0;
    if (horizon) {
        // terminal values are zero, so the first backup is the expected reward
        const std::vector<double> terminal(mdp.n_states(), 0.0);
        if (*horizon > 0) q = q_from_state_values(mdp, terminal), it = 1;
        for (; it < *horizon; ++it) q = soft_bellman_backup(mdp, q, cfg);
    } else {
        bool converged = false;
        while (it < cfg.max_iterations) {
            Matrix next = soft_bellman_backup(mdp, q, cfg);
            const double delta = sup_norm_diff(next, q);
            q = std::move(next);
            ++it;
            if (delta < cfg.tolerance) {
                converged = true;
                break;
            }
        }
        if (!converged) throw std::runtime_error("soft_value_iteration: did not converge");
    }
    SoftSolution sol;
    sol.values.v = soft_state_values(q, cfg.alpha);
    sol.policy = softmax_table(q, cfg.alpha);
    sol.values.q = std::move(q);
    sol.iterations = it;
    return sol;
}

/// Hard value iteration; returns the optimal Q table.
inline Matrix value_iteration(const TabularMDP& mdp, double tolerance = 1e-8,
                              std::size_t max_iterations = 100'000) {
    if (!(mdp.discount() < 1.0)) throw std::invalid_argument("value_iteration: discount must be < 1");
    Matrix q(mdp.n_states(), mdp.n_actions(), 0.0);
    for (std::size_t it = 0; it < max_iterations; ++it) {
        Matrix next = bellman_backup(mdp, q);
        const double delta = sup_norm_diff(next, q);
        q = std::move(next);
        if (delta < tolerance) return q;
    }
    throw std::runtime_error("value_iteration: did not converge");
}

/// On-policy evaluation of a fixed stochastic policy. With entropy_alpha > 0
/// the state value includes the entropy bonus alpha H(pi(.|s)), giving the
/// soft on-policy values; with 0 it is ordinary policy evaluation.
inline ValueTable evaluate_policy(const TabularMDP& mdp, const std::vector<ActionDistribution>& policy,
                                  double entropy_alpha = 0.0, double tolerance = 1e-10,
                                  std::size_t max_iterations = 1'000'000) {
    if (policy.size() != mdp.n_states()) throw std::invalid_argument("evaluate_policy: policy size mismatch");
    if (!(mdp.discount() < 1.0)) throw std::invalid_argument("evaluate_policy: discount must be < 1");
    std::vector<double> v(mdp.n_states(), 0.0);
    Matrix q(mdp.n_states(), mdp.n_actions());
    for (std::size_t it = 0; it < max_iterations; ++it) {
        q = q_from_state_values(mdp, v);
        double delta = 0.0;
        for (std::size_t s = 0; s < mdp.n_states(); ++s) {
            if (policy[s].size() != mdp.n_actions())
                throw std::invalid_argument("evaluate_policy: action count mismatch");
            double nv = entropy_alpha * entropy(policy[s]);
            for (std::size_t a = 0; a < mdp.n_actions(); ++a) nv += policy[s][a] * q(s, a);
            delta = std::max(delta, std::abs(nv - v[s]));
            v[s] = nv;
        }
        if (delta < tolerance) return {v, q_from_state_values(mdp, v)};
    }
    throw std::runtime_error("evaluate_policy: did not converge");
}

struct TrajectoryStep {
    std::vector<double> observation;  // a single-element vector holds a tabular state id
    std::size_t action = 0;
    double reward = 0.0;
    bool done = false;
};

struct Trajectory {
    std::vector<TrajectoryStep> steps;
    std::uint64_t seed = 0;

    void validate() const {
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (!std::isfinite(steps[i].reward)) throw std::invalid_argument("Trajectory: non-finite reward");
            if (steps[i].done && i + 1 != steps.size())
                throw std::invalid_argument("Trajectory: steps after a terminal step");
        }
    }
};

/// sum_t gamma^t r_t.
inline double discounted_return(const Trajectory& traj, double gamma) {
    traj.validate();
    double total = 0.0;
    double weight = 1.0;
    for (const auto& step : traj.steps) {
        total += weight * step.reward;
        weight *= gamma;
    }
    return total;
}

// JSON ----------------------------------------------------------------------

inline nlohmann::json to_json(const TabularMDP& mdp) {
    using nlohmann::json;
    const std::size_t ns = mdp.n_states(), na = mdp.n_actions();
    json p = json::array(), r = json::array();
    for (std::size_t s = 0; s < ns; ++s) {
        json ps = json::array(), rs = json::array();
        for (std::size_t a = 0; a < na; ++a) {
            const auto pr = mdp.transition_row(s, a);
            const auto rr = mdp.reward_row(s, a);
            ps.push_back(std::vector<double>(pr.begin(), pr.end()));
            rs.push_back(std::vector<double>(rr.begin(), rr.end()));
        }
        p.push_back(std::move(ps));
        r.push_back(std::move(rs));
    }
    return json{{"n_states", ns}, {"n_actions", na}, {"transition", p}, {"reward", r},
                {"discount", mdp.discount()}};
}

inline TabularMDP tabular_mdp_from_json(const nlohmann::json& j) {
    const auto ns = j.at("n_states").get<std::size_t>();
    const auto na = j.at("n_actions").get<std::size_t>();
    std::vector<double> p, r;
    p.reserve(ns * na * ns);
    r.reserve(ns * na * ns);
    const auto& jp = j.at("transition");
    const auto& jr = j.at("reward");
    if (jp.size() != ns || jr.size() != ns) throw std::invalid_argument("TabularMDP json: wrong state count");
    for (std::size_t s = 0; s < ns; ++s) {
        if (jp[s].size() != na || jr[s].size() != na)
            throw std::invalid_argument("TabularMDP json: wrong action count");
        for (std::size_t a = 0; a < na; ++a) {
            if (jp[s][a].size() != ns || jr[s][a].size() != ns)
                throw std::invalid_argument("TabularMDP json: wrong successor count");
            for (std::size_t t = 0; t < ns; ++t) {
                p.push_back(jp[s][a][t].get<double>());
                r.push_back(jr[s][a][t].get<double>());
            }
        }
    }
    return TabularMDP(ns, na, std::move(p), std::move(r), j.at("discount").get<double>());
}

inline TabularMDP load_tabular_mdp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open MDP file: " + path);
    return tabular_mdp_from_json(nlohmann::json::parse(in));
}

}  // namespace critstate
