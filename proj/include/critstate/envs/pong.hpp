#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/env.hpp"
#include "critstate/policy.hpp"
#include "critstate/rng.hpp"

namespace critstate {

struct PongConfig {
    double paddle_half_height = 0.1;
    double paddle_speed = 0.04;    // per step
    double opponent_speed = 0.02;  // per step, scripted tracker cap
    double ball_speed = 0.03;      // per step
    double max_serve_angle = 0.8;  // radians from horizontal
    double oracle_distance = 0.3;  // ball within this distance of the player column while approaching
    std::size_t step_limit = 0;
};

inline void to_json(nlohmann::json& j, const PongConfig& c) {
    j = {{"paddle_half_height", c.paddle_half_height}, {"paddle_speed", c.paddle_speed},
         {"opponent_speed", c.opponent_speed},         {"ball_speed", c.ball_speed},
         {"max_serve_angle", c.max_serve_angle},       {"oracle_distance", c.oracle_distance},
         {"step_limit", c.step_limit}};
}

inline void from_json(const nlohmann::json& j, PongConfig& c) {
    c.paddle_half_height = j.value("paddle_half_height", c.paddle_half_height);
    c.paddle_speed = j.value("paddle_speed", c.paddle_speed);
    c.opponent_speed = j.value("opponent_speed", c.opponent_speed);
    c.ball_speed = j.value("ball_speed", c.ball_speed);
    c.max_serve_angle = j.value("max_serve_angle", c.max_serve_angle);
    c.oracle_distance = j.value("oracle_distance", c.oracle_distance);
    c.step_limit = j.value("step_limit", c.step_limit);
}

/// The player's paddle sits on the column x = 0, the opponent's on x = 1.
struct PongState {
    double ball_x = 0.5, ball_y = 0.5;
    double ball_vx = 0.0, ball_vy = 0.0;
    double paddle_y = 0.5;
    double opponent_y = 0.5;
    bool operator==(const PongState&) const = default;
};

enum class PongAction : std::size_t { up = 0, stay = 1, down = 2 };

struct PongOutcome {
    PongState state;
    double reward = 0.0;
    bool done = false;
};

/// Vector-state Pong. Reflections only flip velocity signs, so ball speed is
/// conserved exactly.
class PongEnv final : public Environment {
public:
    explicit PongEnv(PongConfig cfg = {}) : cfg_(cfg) { reset(0); }

    static PongEnv from_state(PongConfig cfg, const PongState& s) {
        PongEnv env(cfg);
        env.s_ = s;
        return env;
    }

    const PongConfig& config() const noexcept { return cfg_; }
    const PongState& state() const noexcept { return s_; }

    PongState reset_state(std::uint64_t seed) {
        rng_ = Rng(seed);
        steps_ = 0;
        const double angle = rng_.uniform(-cfg_.max_serve_angle, cfg_.max_serve_angle);
        const double dir = rng_.bernoulli(0.5) ? 1.0 : -1.0;
        s_ = {0.5, rng_.uniform(0.25, 0.75), dir * cfg_.ball_speed * std::cos(angle),
              cfg_.ball_speed * std::sin(angle), 0.5, 0.5};
        return s_;
    }

    PongOutcome step_action(PongAction action) {
        const double move = action == PongAction::up ? 1.0 : action == PongAction::down ? -1.0 : 0.0;
        s_.paddle_y = std::clamp(s_.paddle_y + move * cfg_.paddle_speed, 0.0, 1.0);
        const double track = std::clamp(s_.ball_y - s_.opponent_y, -cfg_.opponent_speed, cfg_.opponent_speed);
        s_.opponent_y = std::clamp(s_.opponent_y + track, 0.0, 1.0);
        ++steps_;

        const double x0 = s_.ball_x, y0 = s_.ball_y, vx0 = s_.ball_vx, vy0 = s_.ball_vy;
        double x = x0 + s_.ball_vx, y = y0 + s_.ball_vy;
        if (y < 0.0) {
            y = -y;
            s_.ball_vy = -s_.ball_vy;
        } else if (y > 1.0) {
            y = 2.0 - y;
            s_.ball_vy = -s_.ball_vy;
        }

        double reward = 0.0;
        bool done = false;
        if (x < 0.0 || x > 1.0) {
            const double wall = x < 0.0 ? 0.0 : 1.0;
            const double paddle = x < 0.0 ? s_.paddle_y : s_.opponent_y;
            const double crossing = fold_into_board(y0 + (wall - x0) / vx0 * vy0);
            if (std::abs(crossing - paddle) <= cfg_.paddle_half_height) {
                x = 2.0 * wall - x;
                s_.ball_vx = -s_.ball_vx;
            } else {
                done = true;
                reward = x < 0.0 ? -1.0 : 1.0;
                x = std::clamp(x, 0.0, 1.0);
            }
        }
        s_.ball_x = x;
        s_.ball_y = y;
        if (cfg_.step_limit > 0 && steps_ >= cfg_.step_limit) done = true;
        return {s_, reward, done};
    }

    static std::vector<double> encode(const PongState& s) {
        return {s.ball_x, s.ball_y, s.ball_vx, s.ball_vy, s.paddle_y, s.opponent_y};
    }

    std::string name() const override { return "pong"; }
    EnvSpec spec() const override { return {6, 3, std::nullopt, cfg_.step_limit, 0}; }
    std::vector<double> reset(std::uint64_t seed) override { return encode(reset_state(seed)); }
    std::vector<double> observation() const override { return encode(s_); }

    StepResult step(std::size_t action) override {
        if (action > 2) throw std::out_of_range("PongEnv: action index out of range");
        const auto out = step_action(static_cast<PongAction>(action));
        return {encode(out.state), out.reward, out.done, out.reward < 0.0};
    }

    std::unique_ptr<Environment> clone() const override { return std::make_unique<PongEnv>(*this); }
    void reseed(std::uint64_t seed) override { rng_ = Rng(seed); }
    std::vector<double> action_values() const override { return {1.0, 0.0, -1.0}; }

    nlohmann::json scene() const override {
        using nlohmann::json;
        const double h = 2.0 * cfg_.paddle_half_height;
        return {{"env", "pong"},
                {"view", {{"x0", -0.05}, {"y0", -0.05}, {"x1", 1.05}, {"y1", 1.05}}},
                {"background", {10, 10, 10}},
                {"entities",
                 {{{"kind", "rect"}, {"role", "board"}, {"x", 0.5}, {"y", 0.5}, {"heading", 0.0}, {"length", 1.0},
                   {"width", 1.0}, {"color", {30, 60, 30}}},
                  {{"kind", "rect"}, {"role", "paddle"}, {"x", 0.0}, {"y", s_.paddle_y}, {"heading", 0.0},
                   {"length", h}, {"width", 0.02}, {"color", {240, 200, 40}}},
                  {{"kind", "rect"}, {"role", "opponent"}, {"x", 1.0}, {"y", s_.opponent_y}, {"heading", 0.0},
                   {"length", h}, {"width", 0.02}, {"color", {220, 220, 220}}},
                  {{"kind", "circle"}, {"role", "ball"}, {"x", s_.ball_x}, {"y", s_.ball_y}, {"radius", 0.015},
                   {"vx", s_.ball_vx}, {"vy", s_.ball_vy}, {"color", {255, 255, 255}}}}}};
    }

    /// Ball heading toward the player's paddle and within oracle_distance of it.
    bool scripted_critical() const override { return s_.ball_vx < 0.0 && s_.ball_x <= cfg_.oracle_distance; }

private:
    // Unfolded height mapped back into [0, 1] through wall reflections.
    static double fold_into_board(double y) {
        if (y < 0.0) return -y;
        if (y > 1.0) return 2.0 - y;
        return y;
    }

    PongConfig cfg_;
    Rng rng_{0};
    PongState s_;
    std::size_t steps_ = 0;
};

/// Height at which a ball at (x, y) with velocity (vx, vy) reaches `column`,
/// folding the straight path through any number of wall reflections.
inline double predict_crossing(double x, double y, double vx, double vy, double column) {
    if (vx == 0.0) return y;
    double u = y + (column - x) / vx * vy;
    u = std::fmod(u, 2.0);
    if (u < 0.0) u += 2.0;
    return u > 1.0 ? 2.0 - u : u;
}

/// Scripted reference player. It moves toward the predicted crossing height
/// while the ball approaches and drifts back to the centre otherwise. Q(a) is
/// the negative remaining distance after the move, in paddle steps, weighted
/// by how soon the ball arrives.
class PongTrackerPolicy final : public PolicySnapshot {
public:
    explicit PongTrackerPolicy(PongConfig cfg = {}, double alpha = 0.1) : cfg_(cfg), alpha_(alpha) {
        if (!(alpha_ > 0.0)) throw std::invalid_argument("PongTrackerPolicy: alpha must be positive");
    }

    std::size_t num_actions() const override { return 3; }

    ActionDistribution distribution(std::span<const double> obs) const override {
        const auto q = q_values(obs);
        return softmax_policy(q, alpha_);
    }

    std::optional<std::vector<double>> q_row(std::span<const double> obs) const override { return q_values(obs); }

    std::string id() const override { return "pong-tracker"; }

private:
    std::vector<double> q_values(std::span<const double> obs) const {
        if (obs.size() != 6) throw std::invalid_argument("PongTrackerPolicy: expected a pong observation");
        const double bx = obs[0], by = obs[1], vx = obs[2], vy = obs[3], paddle = obs[4];
        double target = 0.5, urgency = 0.1;
        if (vx < 0.0) {
            target = predict_crossing(bx, by, vx, vy, 0.0);
            urgency = 1.0 / (1.0 + (bx / -vx) / 10.0);
        }
        std::vector<double> q(3);
        const double moves[3] = {1.0, 0.0, -1.0};
        for (std::size_t a = 0; a < 3; ++a) {
            const double next = std::clamp(paddle + moves[a] * cfg_.paddle_speed, 0.0, 1.0);
            q[a] = -urgency * std::abs(next - target) / cfg_.paddle_speed;
        }
        return q;
    }

    PongConfig cfg_;
    double alpha_;
};

}  // namespace critstate
