#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/env.hpp"
#include "critstate/rng.hpp"

namespace critstate {

// Kinematics -------------------------------------------------------------------

struct Pose2 {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;
    bool operator==(const Pose2&) const = default;
};

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
    a = std::remainder(a, 2.0 * std::numbers::pi);
    if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
    return a;
}

/// Kinematic bicycle update (rear-axle reference, explicit Euler).
inline Pose2 bicycle_step(const Pose2& pose, double speed, double steering_angle, double dt, double wheelbase) {
    if (!(wheelbase > 0.0)) throw std::invalid_argument("bicycle_step: wheelbase must be positive");
    if (!(dt > 0.0)) throw std::invalid_argument("bicycle_step: dt must be positive");
    if (!(std::abs(steering_angle) < std::numbers::pi / 2))
        throw std::invalid_argument("bicycle_step: |steering angle| must be below pi/2");
    Pose2 out = pose;
    out.x += speed * std::cos(pose.heading) * dt;
    out.y += speed * std::sin(pose.heading) * dt;
    out.heading = wrap_angle(pose.heading + (speed / wheelbase) * std::tan(steering_angle) * dt);
    return out;
}

/// Oriented rectangle; heading 0 points along +y (down the road).
struct Box {
    double x = 0.0, y = 0.0, heading = 0.0;
    double half_length = 0.0, half_width = 0.0;
};

/// Separating-axis overlap test. Touching boxes do not overlap.
inline bool boxes_overlap(const Box& a, const Box& b) {
    const std::array<const Box*, 2> boxes{&a, &b};
    const double dx = b.x - a.x, dy = b.y - a.y;
    for (const Box* owner : boxes) {
        const double fx = std::sin(owner->heading), fy = std::cos(owner->heading);
        const std::array<std::array<double, 2>, 2> axes{{{fx, fy}, {fy, -fx}}};
        for (const auto& ax : axes) {
            auto radius = [&](const Box& bx) {
                const double bfx = std::sin(bx.heading), bfy = std::cos(bx.heading);
                return bx.half_length * std::abs(bfx * ax[0] + bfy * ax[1]) +
                       bx.half_width * std::abs(bfy * ax[0] - bfx * ax[1]);
            };
            if (std::abs(dx * ax[0] + dy * ax[1]) >= radius(a) + radius(b)) return false;
        }
    }
    return true;
}

// Configuration -----------------------------------------------------------------

struct DrivingWeights {
    double forward = 1.0;
    double proximity = 2.0;
    double offset = 0.1;
    double turn = 0.1;
    double steer = 0.05;
    double crash = 10.0;
};

struct DrivingConfig {
    std::size_t n_lanes = 3;
    double lane_width = 1.0;
    double ego_speed = 1.0;
    double dt = 0.1;
    double wheelbase = 0.75;
    double car_length = 1.2;
    double car_width = 0.5;
    double other_speed_min = 0.3;
    double other_speed_max = 0.7;
    double spawn_rate = 0.25;      // Poisson arrivals per unit time at the spawn horizon
    std::size_t initial_cars = 4;  // mean of the Poisson count placed at reset
    double spawn_ahead = 12.0;
    double despawn_behind = 6.0;
    double sensing_range = 10.0;
    std::size_t k_neighbors = 4;
    double steer_scale = 0.1;   // radians of steering change per unit action
    double max_steering = 0.4;  // radians
    double d_safe = 1.5;
    double respawn_clearance = 3.0;
    DrivingWeights weights;
    std::size_t n_actions = 200;
    std::size_t step_limit = 0;
    // scripted critical-state rule
    double oracle_ttc = 6.0;        // time-to-collision horizon, time units
    double oracle_edge_time = 2.0;  // time-to-road-edge horizon, time units

    double road_width() const { return static_cast<double>(n_lanes) * lane_width; }
    double lane_center(std::size_t lane) const { return (static_cast<double>(lane) + 0.5) * lane_width; }

    void validate() const {
        if (n_lanes == 0 || k_neighbors == 0 || n_actions < 2)
            throw std::invalid_argument("DrivingConfig: lanes, neighbors and actions must be positive");
        if (!(lane_width > 0 && dt > 0 && wheelbase > 0 && car_length > 0 && car_width > 0 && d_safe > 0))
            throw std::invalid_argument("DrivingConfig: geometry must be positive");
        if (!(max_steering > 0 && max_steering < std::numbers::pi / 2))
            throw std::invalid_argument("DrivingConfig: max_steering must be in (0, pi/2)");
        if (!(other_speed_min <= other_speed_max) || spawn_rate < 0)
            throw std::invalid_argument("DrivingConfig: bad traffic parameters");
    }
};

inline void to_json(nlohmann::json& j, const DrivingWeights& w) {
    j = {{"forward", w.forward}, {"proximity", w.proximity}, {"offset", w.offset},
         {"turn", w.turn},       {"steer", w.steer},         {"crash", w.crash}};
}

inline void from_json(const nlohmann::json& j, DrivingWeights& w) {
    w.forward = j.value("forward", w.forward);
    w.proximity = j.value("proximity", w.proximity);
    w.offset = j.value("offset", w.offset);
    w.turn = j.value("turn", w.turn);
    w.steer = j.value("steer", w.steer);
    w.crash = j.value("crash", w.crash);
}

inline void to_json(nlohmann::json& j, const DrivingConfig& c) {
    j = {{"n_lanes", c.n_lanes},
         {"lane_width", c.lane_width},
         {"ego_speed", c.ego_speed},
         {"dt", c.dt},
         {"wheelbase", c.wheelbase},
         {"car_length", c.car_length},
         {"car_width", c.car_width},
         {"other_speed_min", c.other_speed_min},
         {"other_speed_max", c.other_speed_max},
         {"spawn_rate", c.spawn_rate},
         {"initial_cars", c.initial_cars},
         {"spawn_ahead", c.spawn_ahead},
         {"despawn_behind", c.despawn_behind},
         {"sensing_range", c.sensing_range},
         {"k_neighbors", c.k_neighbors},
         {"steer_scale", c.steer_scale},
         {"max_steering", c.max_steering},
         {"d_safe", c.d_safe},
         {"respawn_clearance", c.respawn_clearance},
         {"weights", c.weights},
         {"n_actions", c.n_actions},
         {"step_limit", c.step_limit},
         {"oracle_ttc", c.oracle_ttc},
         {"oracle_edge_time", c.oracle_edge_time}};
}

inline void from_json(const nlohmann::json& j, DrivingConfig& c) {
    c.n_lanes = j.value("n_lanes", c.n_lanes);
    c.lane_width = j.value("lane_width", c.lane_width);
    c.ego_speed = j.value("ego_speed", c.ego_speed);
    c.dt = j.value("dt", c.dt);
    c.wheelbase = j.value("wheelbase", c.wheelbase);
    c.car_length = j.value("car_length", c.car_length);
    c.car_width = j.value("car_width", c.car_width);
    c.other_speed_min = j.value("other_speed_min", c.other_speed_min);
    c.other_speed_max = j.value("other_speed_max", c.other_speed_max);
    c.spawn_rate = j.value("spawn_rate", c.spawn_rate);
    c.initial_cars = j.value("initial_cars", c.initial_cars);
    c.spawn_ahead = j.value("spawn_ahead", c.spawn_ahead);
    c.despawn_behind = j.value("despawn_behind", c.despawn_behind);
    c.sensing_range = j.value("sensing_range", c.sensing_range);
    c.k_neighbors = j.value("k_neighbors", c.k_neighbors);
    c.steer_scale = j.value("steer_scale", c.steer_scale);
    c.max_steering = j.value("max_steering", c.max_steering);
    c.d_safe = j.value("d_safe", c.d_safe);
    c.respawn_clearance = j.value("respawn_clearance", c.respawn_clearance);
    if (j.contains("weights")) c.weights = j["weights"].get<DrivingWeights>();
    c.n_actions = j.value("n_actions", c.n_actions);
    c.step_limit = j.value("step_limit", c.step_limit);
    c.oracle_ttc = j.value("oracle_ttc", c.oracle_ttc);
    c.oracle_edge_time = j.value("oracle_edge_time", c.oracle_edge_time);
    c.validate();
}

// State ---------------------------------------------------------------------------

inline constexpr double kNeighborSentinel = 1e6;

struct Neighbor {
    double rel_x = 0.0;
    double rel_y = kNeighborSentinel;
    double rel_heading = 0.0;
    double speed = 0.0;
    bool operator==(const Neighbor&) const = default;
    bool is_padding() const { return rel_y == kNeighborSentinel; }
};

struct DrivingState {
    std::size_t lane_index = 0;
    double ego_x = 0.0;  // lateral, lane-width units from the left road edge
    double ego_y = 0.0;  // longitudinal progress
    double heading = 0.0;
    double steering_angle = 0.0;
    std::vector<Neighbor> neighbors;  // exactly K entries, nearest first
    bool operator==(const DrivingState&) const = default;
};

struct DrivingAction {
    double steer_delta = 0.0;
    explicit DrivingAction(double a = 0.0) : steer_delta(std::clamp(std::isfinite(a) ? a : 0.0, -1.0, 1.0)) {}
};

struct TrafficCar {
    double x = 0.0;
    double y = 0.0;
    double speed = 0.5;
    double desired_speed = 0.5;
    bool operator==(const TrafficCar&) const = default;
};

struct DrivingOutcome {
    DrivingState state;
    double reward = 0.0;
    bool crashed = false;
};

/// Straight multi-lane highway. The ego car moves at constant speed and only
/// steers; slower traffic keeps its lane. A crash (overlap with another car, or
/// the ego centre leaving the road) costs weights.crash and respawns the ego in
/// the clearest lane; the episode continues.
class DrivingEnv final : public Environment {
public:
    explicit DrivingEnv(DrivingConfig cfg = {}) : cfg_(std::move(cfg)) {
        cfg_.validate();
        reset(0);
    }

    /// Builds a fixed scene. Traffic spawning stays active unless the config disables it.
    static DrivingEnv scenario(DrivingConfig cfg, double ego_x, double heading, double steering,
                               std::vector<TrafficCar> cars, std::uint64_t seed = 0) {
        DrivingEnv env(std::move(cfg));
        env.rng_ = Rng(seed);
        env.ego_ = {0.0, ego_x, heading};
        env.steering_ = steering;
        env.cars_ = std::move(cars);
        env.steps_ = 0;
        env.crashes_ = 0;
        return env;
    }

    const DrivingConfig& config() const noexcept { return cfg_; }
    const std::vector<TrafficCar>& cars() const noexcept { return cars_; }
    std::size_t crash_count() const noexcept { return crashes_; }

    DrivingState reset_state(std::uint64_t seed) {
        rng_ = Rng(seed);
        ego_ = {0.0, cfg_.lane_center(cfg_.n_lanes / 2), 0.0};
        steering_ = 0.0;
        steps_ = 0;
        crashes_ = 0;
        cars_.clear();
        const unsigned n = rng_.poisson(static_cast<double>(cfg_.initial_cars));
        for (unsigned i = 0; i < n; ++i) try_spawn(rng_.uniform(3.0, cfg_.spawn_ahead));
        return state();
    }

    DrivingState state() const {
        DrivingState s;
        s.lane_index = lane_of(ego_.y);
        s.ego_x = ego_.y;
        s.ego_y = ego_.x;
        s.heading = ego_.heading;
        s.steering_angle = steering_;
        s.neighbors = neighbors();
        return s;
    }

    DrivingOutcome step_continuous(DrivingAction action) {
        const double a = action.steer_delta;
        steering_ = std::clamp(steering_ + cfg_.steer_scale * a, -cfg_.max_steering, cfg_.max_steering);
        const double progress = cfg_.ego_speed * std::cos(ego_.heading) * cfg_.dt;
        // bicycle frame: x = longitudinal, y = lateral
        ego_ = bicycle_step(ego_, cfg_.ego_speed, steering_, cfg_.dt, cfg_.wheelbase);
        advance_traffic();
        ++steps_;

        const bool crashed = off_road() || collides();
        const DrivingState s = state();
        double reward = cfg_.weights.forward * progress - cfg_.weights.proximity * proximity_penalty() -
                        cfg_.weights.offset * std::abs(lane_offset()) - cfg_.weights.turn * std::abs(ego_.heading) -
                        cfg_.weights.steer * std::abs(a);
        if (crashed) {
            reward -= cfg_.weights.crash;
            ++crashes_;
            respawn();
            return {state(), reward, true};
        }
        return {s, reward, false};
    }

    /// Lateral offset from the centre of the current lane.
    double lane_offset() const { return ego_.y - cfg_.lane_center(lane_of(ego_.y)); }

    /// max(0, 1 - d / d_safe) for the nearest car's centre distance d.
    double proximity_penalty() const {
        double d = std::numeric_limits<double>::infinity();
        for (const auto& c : cars_) d = std::min(d, std::hypot(c.x - ego_.y, c.y - ego_.x));
        return std::max(0.0, 1.0 - d / cfg_.d_safe);
    }

    bool off_road() const { return ego_.y < 0.0 || ego_.y > cfg_.road_width(); }

    bool collides() const {
        const Box ego = ego_box();
        for (const auto& c : cars_)
            if (boxes_overlap(ego, car_box(c))) return true;
        return false;
    }

    Box ego_box() const { return {ego_.y, ego_.x, ego_.heading, 0.5 * cfg_.car_length, 0.5 * cfg_.car_width}; }
    Box car_box(const TrafficCar& c) const { return {c.x, c.y, 0.0, 0.5 * cfg_.car_length, 0.5 * cfg_.car_width}; }

    /// Observation layout: [lane_index, lateral position relative to the road
    /// centre, heading, steering angle] followed by K blocks of
    /// [rel_x, rel_y / sensing_range, rel_heading, speed]. Padding blocks encode
    /// rel_y as 1.5 (outside the sensed band [-1, 1]).
    static std::vector<double> encode(const DrivingState& s, const DrivingConfig& cfg) {
        std::vector<double> obs;
        obs.reserve(4 + 4 * s.neighbors.size());
        obs.push_back(static_cast<double>(s.lane_index));
        obs.push_back(s.ego_x - 0.5 * cfg.road_width());
        obs.push_back(s.heading);
        obs.push_back(s.steering_angle);
        for (const auto& n : s.neighbors) {
            obs.push_back(n.is_padding() ? 0.0 : n.rel_x);
            obs.push_back(n.is_padding() ? 1.5 : std::clamp(n.rel_y / cfg.sensing_range, -1.5, 1.5));
            obs.push_back(n.is_padding() ? 0.0 : n.rel_heading);
            obs.push_back(n.is_padding() ? 0.0 : n.speed);
        }
        return obs;
    }

    // Environment ------------------------------------------------------------------

    std::string name() const override { return "driving"; }

    EnvSpec spec() const override {
        return {4 + 4 * cfg_.k_neighbors, cfg_.n_actions, std::pair{-1.0, 1.0}, cfg_.step_limit, 0};
    }

    std::vector<double> reset(std::uint64_t seed) override { return encode(reset_state(seed), cfg_); }
    std::vector<double> observation() const override { return encode(state(), cfg_); }

    StepResult step(std::size_t action) override {
        if (action >= cfg_.n_actions) throw std::out_of_range("DrivingEnv: action index out of range");
        const auto out = step_continuous(DrivingAction(action_value(action)));
        const bool done = cfg_.step_limit > 0 && steps_ >= cfg_.step_limit;
        return {encode(out.state, cfg_), out.reward, done, out.crashed};
    }

    std::unique_ptr<Environment> clone() const override { return std::make_unique<DrivingEnv>(*this); }
    void reseed(std::uint64_t seed) override { rng_ = Rng(seed); }

    double action_value(std::size_t i) const {
        if (i + 1 == cfg_.n_actions) return 1.0;
        return -1.0 + (2.0 / static_cast<double>(cfg_.n_actions - 1)) * static_cast<double>(i);
    }

    std::vector<double> action_values() const override {
        std::vector<double> v(cfg_.n_actions);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = action_value(i);
        v.back() = 1.0;
        return v;
    }

    nlohmann::json scene() const override {
        using nlohmann::json;
        const double cx = 0.5 * cfg_.road_width();
        const double ey = ego_.x;
        json ents = json::array();
        ents.push_back({{"kind", "rect"}, {"role", "road"}, {"x", cx}, {"y", ey + 4.0}, {"heading", 0.0},
                        {"length", 40.0}, {"width", cfg_.road_width()}, {"color", {90, 90, 90}}});
        for (std::size_t l = 0; l <= cfg_.n_lanes; ++l) {
            const double lx = static_cast<double>(l) * cfg_.lane_width;
            ents.push_back({{"kind", "line"}, {"role", "lane_line"}, {"x0", lx}, {"y0", ey - 16.0}, {"x1", lx},
                            {"y1", ey + 24.0}, {"color", {235, 235, 235}}});
        }
        for (const auto& c : cars_)
            ents.push_back({{"kind", "rect"}, {"role", "car"}, {"x", c.x}, {"y", c.y}, {"heading", 0.0},
                            {"length", cfg_.car_length}, {"width", cfg_.car_width}, {"speed", c.speed},
                            {"color", {60, 110, 220}}});
        ents.push_back({{"kind", "rect"}, {"role", "ego"}, {"x", ego_.y}, {"y", ego_.x}, {"heading", ego_.heading},
                        {"length", cfg_.car_length}, {"width", cfg_.car_width}, {"steering", steering_},
                        {"color", {240, 200, 40}}});
        return {{"env", "driving"},
                {"view", {{"x0", cx - 8.0}, {"y0", ey - 4.0}, {"x1", cx + 8.0}, {"y1", ey + 12.0}}},
                {"background", {70, 140, 70}},
                {"entities", ents}};
    }

    /// A car in the ego corridor within the time-to-collision horizon, or the
    /// ego heading off the road within the edge horizon.
    bool scripted_critical() const override {
        const double vy = cfg_.ego_speed * std::cos(ego_.heading);
        for (const auto& c : cars_) {
            const double rx = c.x - ego_.y, ry = c.y - ego_.x;
            if (ry <= 0.0 || std::abs(rx) >= cfg_.car_width + 0.3) continue;
            const double closing = vy - c.speed;
            if (closing > 0.0 && ry / closing < cfg_.oracle_ttc) return true;
        }
        const double vx = cfg_.ego_speed * std::sin(ego_.heading);
        if (vx > 1e-9 && (cfg_.road_width() - ego_.y) / vx < cfg_.oracle_edge_time) return true;
        if (vx < -1e-9 && ego_.y / -vx < cfg_.oracle_edge_time) return true;
        return false;
    }

    bool operator==(const DrivingEnv& o) const {
        return ego_ == o.ego_ && steering_ == o.steering_ && cars_ == o.cars_ && rng_ == o.rng_ && steps_ == o.steps_;
    }

private:
    std::size_t lane_of(double lateral) const {
        const double l = std::floor(lateral / cfg_.lane_width);
        return static_cast<std::size_t>(std::clamp(l, 0.0, static_cast<double>(cfg_.n_lanes - 1)));
    }

    std::vector<Neighbor> neighbors() const {
        struct Cand {
            double d;
            std::size_t i;
        };
        std::vector<Cand> cand;
        for (std::size_t i = 0; i < cars_.size(); ++i) {
            const double d = std::hypot(cars_[i].x - ego_.y, cars_[i].y - ego_.x);
            if (d <= cfg_.sensing_range) cand.push_back({d, i});
        }
        std::sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) { return a.d < b.d || (a.d == b.d && a.i < b.i); });
        std::vector<Neighbor> out(cfg_.k_neighbors);
        for (std::size_t k = 0; k < std::min(cand.size(), out.size()); ++k) {
            const auto& c = cars_[cand[k].i];
            out[k] = {c.x - ego_.y, c.y - ego_.x, wrap_angle(0.0 - ego_.heading), c.speed};
        }
        return out;
    }

    bool lane_blocked(std::size_t lane, double y, double gap) const {
        const double cx = cfg_.lane_center(lane);
        for (const auto& c : cars_)
            if (std::abs(c.x - cx) < 1e-9 && std::abs(c.y - y) < gap) return true;
        return false;
    }

    // Spawns one car at ego_y + ahead in a random lane unless it would overlap
    // an existing car or wall off every lane at that distance.
    void try_spawn(double ahead) {
        const std::size_t lane = rng_.index(cfg_.n_lanes);
        const double speed = rng_.uniform(cfg_.other_speed_min, cfg_.other_speed_max);
        const double y = ego_.x + ahead;
        if (lane_blocked(lane, y, 2.5 * cfg_.car_length)) return;
        if (cfg_.n_lanes > 1) {
            bool all_blocked = true;
            for (std::size_t l = 0; l < cfg_.n_lanes && all_blocked; ++l)
                if (l != lane && !lane_blocked(l, y, 2.0 * cfg_.car_length)) all_blocked = false;
            if (all_blocked) return;
        }
        cars_.push_back({cfg_.lane_center(lane), y, speed, speed});
    }

    void advance_traffic() {
        // follow the leader in the same lane to keep traffic collision-free
        std::vector<std::size_t> order(cars_.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return cars_[a].x < cars_[b].x || (cars_[a].x == cars_[b].x && (cars_[a].y > cars_[b].y || (cars_[a].y == cars_[b].y && a < b)));
        });
        for (std::size_t k = 0; k < order.size(); ++k) {
            auto& c = cars_[order[k]];
            c.speed = c.desired_speed;
            if (k > 0) {
                const auto& lead = cars_[order[k - 1]];
                if (lead.x == c.x && lead.y - c.y - cfg_.car_length < cfg_.car_length)
                    c.speed = std::min(c.desired_speed, lead.speed);
            }
        }
        for (auto& c : cars_) c.y += c.speed * cfg_.dt;
        std::erase_if(cars_, [&](const TrafficCar& c) { return c.y < ego_.x - cfg_.despawn_behind; });
        const unsigned arrivals = rng_.poisson(cfg_.spawn_rate * cfg_.dt);
        for (unsigned i = 0; i < arrivals; ++i) try_spawn(cfg_.spawn_ahead + rng_.uniform(0.0, 2.0));
    }

    void respawn() {
        std::size_t best = 0;
        double best_clear = -1.0;
        for (std::size_t l = 0; l < cfg_.n_lanes; ++l) {
            double clear = std::numeric_limits<double>::infinity();
            for (const auto& c : cars_)
                if (std::abs(c.x - cfg_.lane_center(l)) < 1e-9) clear = std::min(clear, std::abs(c.y - ego_.x));
            if (clear > best_clear) {
                best_clear = clear;
                best = l;
            }
        }
        const double cx = cfg_.lane_center(best);
        std::erase_if(cars_, [&](const TrafficCar& c) {
            return std::abs(c.x - cx) < 1e-9 && std::abs(c.y - ego_.x) < cfg_.respawn_clearance;
        });
        ego_.y = cx;
        ego_.heading = 0.0;
        steering_ = 0.0;
    }

    DrivingConfig cfg_;
    Rng rng_{0};
    Pose2 ego_;  // x = longitudinal, y = lateral (bicycle frame)
    double steering_ = 0.0;
    std::vector<TrafficCar> cars_;
    std::size_t steps_ = 0;
    std::size_t crashes_ = 0;
};

/// Free-function form of the driving dynamics.
inline DrivingState driving_reset(DrivingEnv& env, std::uint64_t seed) { return env.reset_state(seed); }
inline DrivingOutcome driving_step(DrivingEnv& env, DrivingAction action) { return env.step_continuous(action); }

}  // namespace critstate
