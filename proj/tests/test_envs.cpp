#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "critstate/envs/registry.hpp"
#include "critstate/rollout.hpp"

using namespace critstate;

namespace {

struct Circle {
    double cx, cy, r;
};

Circle circumcircle(const Pose2& a, const Pose2& b, const Pose2& c) {
    const double d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
    const double a2 = a.x * a.x + a.y * a.y, b2 = b.x * b.x + b.y * b.y, c2 = c.x * c.x + c.y * c.y;
    const double cx = (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d;
    const double cy = (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d;
    return {cx, cy, std::hypot(a.x - cx, a.y - cy)};
}

}  // namespace

TEST(Bicycle, ConstantSteeringTracesTheChordCircle) {
    const double v = 1.0, dt = 0.1, L = 0.75;
    for (double delta : {0.05, 0.2, 0.4}) {
        std::vector<Pose2> pts{{0.0, 0.0, 0.0}};
        for (int k = 0; k < 200; ++k) pts.push_back(bicycle_step(pts.back(), v, delta, dt, L));
        const double turn = v / L * std::tan(delta) * dt;
        const double expected_r = v * dt / (2.0 * std::sin(turn / 2.0));
        const Circle c = circumcircle(pts[0], pts[1], pts[2]);
        EXPECT_NEAR(c.r, expected_r, 1e-9 * expected_r);
        for (const auto& p : pts) EXPECT_NEAR(std::hypot(p.x - c.cx, p.y - c.cy), expected_r, 1e-9 * expected_r);
        EXPECT_NEAR(pts[1].heading, turn, 1e-15);
    }
}

TEST(Bicycle, SmallStepRadiusApproachesContinuousTurningRadius) {
    const double L = 0.75, delta = 0.3;
    const double continuous = L / std::tan(delta);
    double prev_err = INFINITY;
    for (double dt : {0.1, 0.01, 0.001}) {
        const double turn = 1.0 / L * std::tan(delta) * dt;
        const double r = dt / (2.0 * std::sin(turn / 2.0));
        const double err = std::abs(r - continuous);
        EXPECT_LT(err, prev_err);
        prev_err = err;
    }
    EXPECT_LT(prev_err, 1e-6);
}

TEST(Bicycle, StraightLineAndValidation) {
    Pose2 p{1.0, 2.0, 0.0};
    p = bicycle_step(p, 2.0, 0.0, 0.5, 1.0);
    EXPECT_DOUBLE_EQ(p.x, 2.0);
    EXPECT_DOUBLE_EQ(p.y, 2.0);
    EXPECT_EQ(p.heading, 0.0);
    EXPECT_THROW(bicycle_step(p, 1.0, 0.0, 0.1, 0.0), std::invalid_argument);
    EXPECT_THROW(bicycle_step(p, 1.0, 0.0, 0.0, 1.0), std::invalid_argument);
    EXPECT_THROW(bicycle_step(p, 1.0, std::numbers::pi / 2, 0.1, 1.0), std::invalid_argument);
}

TEST(Boxes, SeparatingAxis) {
    const Box a{0.0, 0.0, 0.0, 0.6, 0.25};
    EXPECT_TRUE(boxes_overlap(a, {0.3, 0.5, 0.0, 0.6, 0.25}));
    EXPECT_FALSE(boxes_overlap(a, {0.5, 0.0, 0.0, 0.6, 0.25}));  // touching
    EXPECT_FALSE(boxes_overlap(a, {0.0, 1.3, 0.0, 0.6, 0.25}));
    EXPECT_TRUE(boxes_overlap(a, {0.6, 0.0, std::numbers::pi / 2, 0.6, 0.25}));
}

TEST(Driving, ObservationLayoutAndPadding) {
    DrivingConfig cfg;
    cfg.spawn_rate = 0.0;
    auto env = DrivingEnv::scenario(cfg, cfg.lane_center(1), 0.0, 0.0, {{cfg.lane_center(1), 3.0, 0.5, 0.5}});
    const auto obs = env.observation();
    ASSERT_EQ(obs.size(), 4 + 4 * cfg.k_neighbors);
    EXPECT_EQ(obs[0], 1.0);
    EXPECT_DOUBLE_EQ(obs[1], 0.0);
    EXPECT_DOUBLE_EQ(obs[5], 3.0 / cfg.sensing_range);
    for (std::size_t k = 1; k < cfg.k_neighbors; ++k) EXPECT_EQ(obs[4 + 4 * k + 1], 1.5);
    const auto s = env.state();
    EXPECT_FALSE(s.neighbors[0].is_padding());
    EXPECT_TRUE(s.neighbors[1].is_padding());
}

TEST(Driving, OffRoadCountsAsCrashAndRespawns) {
    DrivingConfig cfg;
    cfg.spawn_rate = 0.0;
    auto env = DrivingEnv::scenario(cfg, cfg.road_width() - 0.02, 0.5, 0.0, {});
    const StepResult r = env.step(199);
    EXPECT_TRUE(r.crashed);
    EXPECT_FALSE(r.done);
    EXPECT_EQ(env.crash_count(), 1u);
    EXPECT_LT(r.reward, -cfg.weights.crash + 1.0);
    const auto s = env.state();
    EXPECT_EQ(s.heading, 0.0);
    EXPECT_EQ(s.steering_angle, 0.0);
    EXPECT_NEAR(s.ego_x, cfg.lane_center(s.lane_index), 1e-12);
}

TEST(Driving, CollisionCountsAsCrash) {
    DrivingConfig cfg;
    cfg.spawn_rate = 0.0;
    auto env = DrivingEnv::scenario(cfg, cfg.lane_center(1), 0.0, 0.0, {{cfg.lane_center(1), 1.15, 0.0, 0.0}});
    const StepResult r = env.step(100);
    EXPECT_TRUE(r.crashed);
    EXPECT_EQ(env.crash_count(), 1u);
}

TEST(Driving, StepLimitEndsEpisode) {
    DrivingConfig cfg;
    cfg.step_limit = 3;
    DrivingEnv env(cfg);
    env.reset(1);
    EXPECT_FALSE(env.step(100).done);
    EXPECT_FALSE(env.step(100).done);
    EXPECT_TRUE(env.step(100).done);
}

TEST(Driving, ActionIndexOutOfRange) {
    DrivingEnv env;
    EXPECT_THROW(env.step(200), std::out_of_range);
}

TEST(Driving, SteeringIsClamped) {
    DrivingConfig cfg;
    cfg.spawn_rate = 0.0;
    auto env = DrivingEnv::scenario(cfg, cfg.lane_center(1), 0.0, 0.0, {});
    for (int i = 0; i < 10; ++i) env.step_continuous(DrivingAction{1.0});
    EXPECT_LE(env.state().steering_angle, cfg.max_steering);
}

TEST(Driving, ConfigJsonRoundTrip) {
    DrivingConfig cfg;
    cfg.n_lanes = 4;
    cfg.weights.crash = 7.0;
    const auto back = nlohmann::json(cfg).get<DrivingConfig>();
    EXPECT_EQ(back.n_lanes, 4u);
    EXPECT_EQ(back.weights.crash, 7.0);
    EXPECT_THROW(make_env("driving", {{"max_steering", 2.0}}), std::invalid_argument);
}

TEST(Pong, CrossingMatchesFineStepSimulation) {
    Rng rng(17);
    for (int c = 0; c < 200; ++c) {
        const double x = rng.uniform(0.2, 0.9), y = rng.uniform(0.0, 1.0);
        const double angle = rng.uniform(-1.2, 1.2);
        const double vx = -std::cos(angle), vy = std::sin(angle);
        double px = x, py = y, pvy = vy;
        const double h = 1e-5;
        while (px > 0.0) {
            px += vx * h;
            py += pvy * h;
            if (py < 0.0) {
                py = -py;
                pvy = -pvy;
            } else if (py > 1.0) {
                py = 2.0 - py;
                pvy = -pvy;
            }
        }
        EXPECT_NEAR(predict_crossing(x, y, vx, vy, 0.0), py, 1e-4) << "case " << c;
    }
}

TEST(Pong, BallSpeedIsConserved) {
    PongEnv env;
    env.reset(3);
    const PongTrackerPolicy tracker;
    const double speed = std::hypot(env.state().ball_vx, env.state().ball_vy);
    for (int t = 0; t < 2000; ++t) {
        const auto obs = env.observation();
        const StepResult r = env.step(tracker.distribution(obs).argmax());
        if (r.done) env.reset(100 + t);
        EXPECT_DOUBLE_EQ(std::hypot(env.state().ball_vx, env.state().ball_vy), speed);
    }
}

TEST(Pong, MissedBallEndsEpisodeWithPenalty) {
    const PongConfig cfg;
    auto env = PongEnv::from_state(cfg, {0.01, 0.9, -0.03, 0.0, 0.1, 0.5});
    const StepResult r = env.step(1);
    EXPECT_TRUE(r.done);
    EXPECT_TRUE(r.crashed);
    EXPECT_EQ(r.reward, -1.0);
}

TEST(Pong, PaddleReturnsTheBall) {
    const PongConfig cfg;
    auto env = PongEnv::from_state(cfg, {0.01, 0.5, -0.03, 0.0, 0.5, 0.5});
    const StepResult r = env.step(1);
    EXPECT_FALSE(r.done);
    EXPECT_GT(env.state().ball_vx, 0.0);
    EXPECT_NEAR(env.state().ball_x, 0.02, 1e-12);
}

TEST(Pong, TrackerRarelyMisses) {
    PongEnv env;
    const PongTrackerPolicy tracker;
    RolloutCursor cursor(env, tracker, 5);
    std::size_t misses = 0, returns = 0;
    for (int t = 0; t < 5000; ++t) {
        const double vx = env.state().ball_vx;
        const StepResult r = cursor.step();
        if (r.crashed) ++misses;
        if (!r.done && vx < 0.0 && env.state().ball_vx > 0.0) ++returns;
    }
    EXPECT_GT(returns, 10 * std::max<std::size_t>(misses, 1));
}

TEST(Pong, ScriptedRuleNeedsApproachAndProximity) {
    const PongConfig cfg;
    EXPECT_TRUE(PongEnv::from_state(cfg, {0.2, 0.5, -0.03, 0.0, 0.5, 0.5}).scripted_critical());
    EXPECT_FALSE(PongEnv::from_state(cfg, {0.2, 0.5, 0.03, 0.0, 0.5, 0.5}).scripted_critical());
    EXPECT_FALSE(PongEnv::from_state(cfg, {0.6, 0.5, -0.03, 0.0, 0.5, 0.5}).scripted_critical());
}

TEST(Environments, SameSeedSameStream) {
    for (const auto& name : known_envs()) {
        auto a = make_env(name), b = make_env(name);
        UniformPolicy pol(a->spec().n_actions);
        RolloutCursor ca(*a, pol, 42), cb(*b, pol, 42);
        for (int t = 0; t < 500; ++t) {
            const StepResult ra = ca.step(), rb = cb.step();
            ASSERT_EQ(ra.observation, rb.observation) << name << " step " << t;
            ASSERT_EQ(ra.reward, rb.reward);
        }
    }
}

TEST(Environments, ClonesAreIndependent) {
    for (const auto& name : known_envs()) {
        auto env = make_env(name);
        env->reset(9);
        for (int t = 0; t < 20; ++t) env->step(t % env->spec().n_actions);
        auto copy = env->clone();
        const auto before = env->observation();
        for (int t = 0; t < 50; ++t) {
            const StepResult r = copy->step(0);
            if (r.done) copy->reset(t);
        }
        EXPECT_EQ(env->observation(), before) << name;
        auto twin = env->clone();
        for (int t = 0; t < 50; ++t) {
            const StepResult ra = env->step(1), rb = twin->step(1);
            ASSERT_EQ(ra.observation, rb.observation) << name;
            if (ra.done) {
                env->reset(t);
                twin->reset(t);
            }
        }
    }
}

TEST(Environments, RegistryRejectsUnknownNames) {
    EXPECT_THROW(make_env("atari"), std::invalid_argument);
    EXPECT_THROW(query_states("chain"), std::invalid_argument);
}

TEST(QueryStates, LabelsFollowTheScriptedRule) {
    const auto pong = query_states("pong");
    ASSERT_EQ(pong.size(), 6u);
    std::size_t critical = 0;
    for (const auto& q : pong) critical += q.critical;
    EXPECT_EQ(critical, 2u);
    EXPECT_TRUE(pong[4].critical);
    EXPECT_TRUE(pong[5].critical);

    const auto driving = query_states("driving");
    ASSERT_EQ(driving.size(), 9u);
    EXPECT_FALSE(driving[0].critical);
    EXPECT_TRUE(driving[2].critical);
    EXPECT_TRUE(driving[6].critical);
    for (const auto& q : driving) EXPECT_EQ(q.observation().size(), 20u);
}

TEST(Chain, FollowsTheTransitionTable) {
    auto env = make_env("chain");
    env->reset(0);
    StepResult r = env->step(0);
    EXPECT_EQ(r.observation, (std::vector<double>{0.0, 1.0}));
    EXPECT_EQ(r.reward, 1.0);
    r = env->step(1);
    EXPECT_EQ(r.observation, (std::vector<double>{1.0, 0.0}));
    EXPECT_EQ(r.reward, 0.0);
}
