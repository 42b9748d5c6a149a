#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/env.hpp"
#include "critstate/mdp.hpp"
#include "critstate/policy.hpp"
#include "critstate/rng.hpp"

namespace critstate {

enum class CriticalityMethod { entropy_based, value_based };

inline std::string to_string(CriticalityMethod m) {
    return m == CriticalityMethod::entropy_based ? "entropy_based" : "value_based";
}

inline CriticalityMethod criticality_method_from_string(const std::string& s) {
    if (s == "entropy_based" || s == "entropy") return CriticalityMethod::entropy_based;
    if (s == "value_based" || s == "value") return CriticalityMethod::value_based;
    throw std::invalid_argument("unknown criticality method: " + s);
}

/// Both methods are oriented so that larger means more critical.
struct CriticalityScore {
    double value = 0.0;
    CriticalityMethod method = CriticalityMethod::value_based;
    std::size_t state_id = 0;
    ActionDistribution distribution;
    std::optional<std::vector<double>> q_row;
};

struct CriticalityThreshold {
    enum class Mode { absolute, percentile };
    Mode mode = Mode::percentile;
    double t = 90.0;

    static CriticalityThreshold absolute(double t) { return {Mode::absolute, t}; }
    static CriticalityThreshold percentile(double p) {
        CriticalityThreshold thr{Mode::percentile, p};
        thr.validate();
        return thr;
    }

    void validate() const {
        if (!std::isfinite(t)) throw std::invalid_argument("CriticalityThreshold: t must be finite");
        if (mode == Mode::percentile && (t < 0.0 || t > 100.0))
            throw std::invalid_argument("CriticalityThreshold: percentile must be in [0, 100]");
    }
};

inline void to_json(nlohmann::json& j, const CriticalityThreshold& thr) {
    j = {{"mode", thr.mode == CriticalityThreshold::Mode::absolute ? "absolute" : "percentile"}, {"t", thr.t}};
}

inline void from_json(const nlohmann::json& j, CriticalityThreshold& thr) {
    const std::string mode = j.value("mode", std::string("percentile"));
    if (mode == "absolute") thr.mode = CriticalityThreshold::Mode::absolute;
    else if (mode == "percentile") thr.mode = CriticalityThreshold::Mode::percentile;
    else throw std::invalid_argument("CriticalityThreshold: unknown mode " + mode);
    thr.t = j.value("t", thr.t);
    thr.validate();
}

// Action grids --------------------------------------------------------------------

struct ActionGrid {
    double low = -1.0;
    double high = 1.0;
    std::size_t n = 0;
    std::vector<double> points;

    double spacing() const { return (high - low) / static_cast<double>(n - 1); }

    /// Index of the grid point nearest to `value` (clamped to the interval).
    std::size_t nearest(double value) const {
        const double pos = (std::clamp(value, low, high) - low) / spacing();
        return std::min(static_cast<std::size_t>(std::llround(pos)), n - 1);
    }
};

/// n evenly spaced points on [low, high], both endpoints included exactly.
inline ActionGrid discretize(double low, double high, std::size_t n) {
    if (n < 2) throw std::invalid_argument("discretize: need at least two points");
    if (!(low < high) || !std::isfinite(low) || !std::isfinite(high))
        throw std::invalid_argument("discretize: need finite low < high");
    ActionGrid g{low, high, n, std::vector<double>(n)};
    const double step = (high - low) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) g.points[i] = low + step * static_cast<double>(i);
    g.points.front() = low;
    g.points.back() = high;
    return g;
}

// Scores --------------------------------------------------------------------------

struct EntropyOptions {
    // Drop the two boundary actions and renormalize before measuring entropy,
    // so mass piled on clipped extremes does not read as spread.
    bool exclude_boundary_actions = false;
};

/// ln n - H(p); zero exactly for the uniform distribution.
inline double entropy_score(const ActionDistribution& dist, const EntropyOptions& opt = {}) {
    const auto& p = dist.probabilities();
    for (double x : p)
        if (!std::isfinite(x)) throw std::invalid_argument("entropy_score: non-finite probability");
    if (opt.exclude_boundary_actions && p.size() > 2) {
        std::vector<double> inner(p.begin() + 1, p.end() - 1);
        double mass = 0.0;
        for (double x : inner) mass += x;
        if (!(mass > 0.0)) return std::log(static_cast<double>(inner.size()));
        for (double& x : inner) x /= mass;
        double h = 0.0;
        for (double x : inner)
            if (x > 0.0) h -= x * std::log(x);
        return std::max(0.0, std::log(static_cast<double>(inner.size())) - std::max(0.0, h));
    }
    bool uniform = true;
    for (double x : p) uniform = uniform && x == p.front();
    if (uniform) return 0.0;
    return std::max(0.0, std::log(static_cast<double>(p.size())) - entropy(dist));
}

/// max(q) - mean(q), computed as the mean gap to the maximum so that a shift
/// applied without rounding leaves the result bit-identical.
inline double value_score(std::span<const double> q) {
    if (q.empty()) throw std::invalid_argument("value_score: empty Q-row");
    double mx = q.front();
    for (double v : q) {
        if (!std::isfinite(v)) throw std::invalid_argument("value_score: non-finite Q value");
        mx = std::max(mx, v);
    }
    double gap = 0.0;
    for (double v : q) gap += mx - v;
    return gap / static_cast<double>(q.size());
}

inline CriticalityScore entropy_criticality(const PolicySnapshot& policy, std::span<const double> observation,
                                            std::size_t state_id = 0, const EntropyOptions& opt = {}) {
    CriticalityScore s;
    s.method = CriticalityMethod::entropy_based;
    s.state_id = state_id;
    s.distribution = policy.distribution(observation);
    s.value = entropy_score(s.distribution, opt);
    s.q_row = policy.q_row(observation);
    return s;
}

inline CriticalityScore value_criticality(std::span<const double> q_row, std::size_t state_id = 0) {
    CriticalityScore s;
    s.method = CriticalityMethod::value_based;
    s.state_id = state_id;
    s.value = value_score(q_row);
    s.q_row = std::vector<double>(q_row.begin(), q_row.end());
    return s;
}

/// Value-based score from the policy's own Q-row.
inline CriticalityScore value_criticality(const PolicySnapshot& policy, std::span<const double> observation,
                                          std::size_t state_id = 0) {
    auto q = policy.q_row(observation);
    if (!q) throw std::invalid_argument("value_criticality: policy exposes no Q-row; use q_from_value_rollout");
    CriticalityScore s = value_criticality(*q, state_id);
    s.distribution = policy.distribution(observation);
    return s;
}

inline CriticalityScore score_state(const PolicySnapshot& policy, std::span<const double> observation,
                                    CriticalityMethod method, std::size_t state_id = 0,
                                    const EntropyOptions& opt = {}) {
    return method == CriticalityMethod::entropy_based ? entropy_criticality(policy, observation, state_id, opt)
                                                      : value_criticality(policy, observation, state_id);
}

// One-step rollouts ---------------------------------------------------------------

using ValueFunction = std::function<double(std::span<const double> observation)>;

struct RolloutOptions {
    std::size_t samples = 1;  // m one-step simulations per action
    double discount = 0.95;
    std::uint64_t seed = 0;
};

/// Q(s, a) = mean over m samples of r + discount * v(s'), with v(s') = 0 on
/// terminal steps. `env` holds s and is never modified; each sample runs on a
/// clone reseeded from (seed, action, sample).
inline std::vector<double> q_from_value_rollout(const Environment& env, const ValueFunction& v,
                                                const RolloutOptions& opt = {}) {
    if (opt.samples == 0) throw std::invalid_argument("q_from_value_rollout: samples must be positive");
    const std::size_t n = env.spec().n_actions;
    std::vector<double> q(n, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
        double total = 0.0;
        for (std::size_t j = 0; j < opt.samples; ++j) {
            auto sim = env.clone();
            sim->reseed(derive_seed(opt.seed, a * opt.samples + j));
            const StepResult r = sim->step(a);
            total += r.reward + (r.done ? 0.0 : opt.discount * v(r.observation));
        }
        q[a] = total / static_cast<double>(opt.samples);
    }
    return q;
}

/// Same rollout for a grid whose length must match the environment's action set.
inline std::vector<double> q_from_value_rollout(const Environment& env, const ValueFunction& v,
                                                const ActionGrid& grid, const RolloutOptions& opt = {}) {
    if (grid.n != env.spec().n_actions)
        throw std::invalid_argument("q_from_value_rollout: grid size differs from the action count");
    return q_from_value_rollout(env, v, opt);
}

/// Exact expectation against a tabular model.
inline std::vector<double> q_from_value_rollout(const TabularMDP& mdp, std::span<const double> v, std::size_t state) {
    if (state >= mdp.n_states()) throw std::out_of_range("q_from_value_rollout: state out of range");
    if (v.size() != mdp.n_states()) throw std::invalid_argument("q_from_value_rollout: value table size mismatch");
    std::vector<double> q(mdp.n_actions(), 0.0);
    for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
        const auto p = mdp.transition_row(state, a);
        const auto r = mdp.reward_row(state, a);
        for (std::size_t s2 = 0; s2 < mdp.n_states(); ++s2)
            if (p[s2] > 0.0) q[a] += p[s2] * (r[s2] + mdp.discount() * v[s2]);
    }
    return q;
}

// Thresholds ----------------------------------------------------------------------

/// Linear interpolation between order statistics at rank p/100 * (n - 1).
inline double percentile(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("percentile: empty input");
    if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile: p must be in [0, 100]");
    std::sort(values.begin(), values.end());
    const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

inline double resolve_threshold(std::span<const double> scores, const CriticalityThreshold& thr) {
    thr.validate();
    if (thr.mode == CriticalityThreshold::Mode::absolute) return thr.t;
    if (scores.empty()) throw std::invalid_argument("resolve_threshold: no scores for percentile mode");
    return percentile(std::vector<double>(scores.begin(), scores.end()), thr.t);
}

/// Membership in the critical set: strictly above the cutoff.
inline bool is_critical(double score, double cutoff) { return score > cutoff; }

/// Entropy cutoff t on H maps to the score cutoff ln n - t.
inline double entropy_cutoff_from_entropy_threshold(double t, std::size_t n_actions) {
    return std::log(static_cast<double>(n_actions)) - t;
}

/// Rows of state_id,method,score,above_threshold.
inline void write_score_table(std::ostream& out, const std::vector<CriticalityScore>& scores, double cutoff) {
    out << "state_id,method,score,above_threshold\n";
    out.precision(17);
    for (const auto& s : scores)
        out << s.state_id << ',' << to_string(s.method) << ',' << s.value << ','
            << (is_critical(s.value, cutoff) ? 1 : 0) << '\n';
}

}  // namespace critstate
