#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/env.hpp"
#include "critstate/envs/driving.hpp"
#include "critstate/envs/pong.hpp"
#include "critstate/envs/tabular.hpp"

namespace critstate {

inline const std::vector<std::string>& known_envs() {
    static const std::vector<std::string> names{"driving", "pong", "chain"};
    return names;
}

/// Environment by name. `cfg` is the env-specific config block; absent keys
/// take defaults and unknown keys are ignored.
inline EnvPtr make_env(const std::string& name, const nlohmann::json& cfg = nlohmann::json::object()) {
    const nlohmann::json block = cfg.is_null() ? nlohmann::json::object() : cfg;
    if (name == "driving") return std::make_unique<DrivingEnv>(block.get<DrivingConfig>());
    if (name == "pong") return std::make_unique<PongEnv>(block.get<PongConfig>());
    if (name == "chain") return std::make_unique<TabularEnv>(chain_mdp(block.value("discount", 0.9)), "chain");
    throw std::invalid_argument("unknown environment: " + name);
}

/// A curated state with a ground-truth criticality label.
struct LabeledState {
    std::string label;
    bool critical = false;
    std::shared_ptr<const Environment> env;  // positioned at the state

    std::vector<double> observation() const { return env->observation(); }
    nlohmann::json scene() const { return env->scene(); }
};

namespace detail {

inline std::vector<LabeledState> pong_query_states() {
    const PongConfig cfg;
    const double v = cfg.ball_speed;
    const double d = v * std::cos(0.5), e = v * std::sin(0.5);
    // ball_x, ball_y, vx, vy, paddle, opponent
    const std::vector<std::pair<std::string, PongState>> states{
        {"s1", {0.55, 0.5, d, e, 0.5, 0.5}},      // heading to the opponent
        {"s2", {0.9, 0.3, -d, e, 0.5, 0.3}},      // just returned by the opponent
        {"s3", {0.5, 0.7, -d, -e, 0.6, 0.5}},     // approaching, plenty of time
        {"s4", {0.12, 0.4, d, -e, 0.4, 0.6}},     // just hit, leaving the paddle
        {"s5", {0.12, 0.78, -d, e, 0.5, 0.6}},    // arriving above the paddle: move up
        {"s6", {0.12, 0.22, -d, -e, 0.5, 0.4}},   // arriving below the paddle: move down
    };
    std::vector<LabeledState> out;
    for (const auto& [label, s] : states) {
        auto env = std::make_shared<PongEnv>(PongEnv::from_state(cfg, s));
        out.push_back({label, env->scripted_critical(), env});
    }
    return out;
}

inline std::vector<LabeledState> driving_query_states() {
    DrivingConfig cfg;
    cfg.spawn_rate = 0.0;
    const double l0 = cfg.lane_center(0), l1 = cfg.lane_center(1), l2 = cfg.lane_center(2);
    struct Spec {
        std::string label;
        double ego_x, heading;
        std::vector<TrafficCar> cars;
    };
    auto car = [](double x, double y, double v) { return TrafficCar{x, y, v, v}; };
    const std::vector<Spec> specs{
        {"s1", l1, 0.0, {}},                                                    // open road
        {"s2", l1, 0.0, {car(l0, 5.0, 0.6), car(l2, 8.0, 0.5)}},               // traffic in other lanes, far
        {"s3", l1, 0.0, {car(l1, 2.0, 0.4)}},                                   // slow car ahead
        {"s4", l1, 0.0, {car(l1, 1.8, 0.4), car(l0, 0.5, 0.5)}},               // ahead, left lane occupied
        {"s5", l1, 0.0, {car(l1, 2.0, 0.3), car(l2, 0.8, 0.5)}},               // ahead, right lane occupied
        {"s6", l0, 0.0, {car(l0, 2.2, 0.4), car(l1, 4.0, 0.6)}},               // left lane, car ahead
        {"s7", l2 + 0.2, 0.35, {}},                                             // drifting off the right edge
        {"s8", l2, 0.0, {car(l2, 1.6, 0.3), car(l1, -0.5, 0.6)}},              // right lane, car ahead, car alongside
        {"s9", l1, 0.0, {car(l1, 2.4, 0.35), car(l0, 2.6, 0.4), car(l2, 3.5, 0.4)}},  // all lanes ahead occupied
    };
    std::vector<LabeledState> out;
    for (const auto& s : specs) {
        auto env = std::make_shared<DrivingEnv>(DrivingEnv::scenario(cfg, s.ego_x, s.heading, 0.0, s.cars));
        out.push_back({s.label, env->scripted_critical(), env});
    }
    return out;
}

}  // namespace detail

/// Bundled diagnostic states. Labels come from each environment's scripted
/// critical-state rule.
inline std::vector<LabeledState> query_states(const std::string& env_name) {
    if (env_name == "pong") return detail::pong_query_states();
    if (env_name == "driving") return detail::driving_query_states();
    throw std::invalid_argument("no query states for environment: " + env_name);
}

}  // namespace critstate
