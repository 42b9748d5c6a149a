// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "critstate/config.hpp"
#include "critstate/envs/registry.hpp"
#include "critstate/envs/tabular.hpp"
#include "critstate/server.hpp"
#include "support/oracles.hpp"
#include "support/process.hpp"

using namespace critstate;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int prec = 3) {
    std::ostringstream s;
    s << std::setprecision(prec) << x;
    return s.str();
}

oracle::Mdp to_oracle(const TabularMDP& m) {
    oracle::Mdp o;
    o.ns = m.n_states();
    o.na = m.n_actions();
    o.gamma = m.discount();
    o.p.assign(o.ns, oracle::Mat(o.na, oracle::Vec(o.ns)));
    o.r = o.p;
    for (std::size_t s = 0; s < o.ns; ++s)
        for (std::size_t a = 0; a < o.na; ++a)
            for (std::size_t t = 0; t < o.ns; ++t) {
                o.p[s][a][t] = m.transition(s, a, t);
                o.r[s][a][t] = m.reward(s, a, t);
            }
    return o;
}

Outcome soft_bellman_oracle() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (double alpha : {0.1, 1.0})
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const TabularMDP mdp = random_mdp(5, 3, 0.9, 5000 + seed);
            MaxEntConfig cfg;
            cfg.alpha = alpha;
            const SoftSolution sol = soft_value_iteration(mdp, cfg);
            const auto q = oracle::soft_q_by_policy_iteration(to_oracle(mdp), alpha);
            for (std::size_t s = 0; s < 5; ++s)
                for (std::size_t a = 0; a < 3; ++a) worst = std::max(worst, std::abs(sol.values.q(s, a) - q[s][a]));
        }
    double closed = 0.0;
    for (double alpha : {0.1, 1.0}) {
        const TabularMDP one = TabularMDP::deterministic({{0, 0}}, {{0.0, 0.0}}, 0.9);
        MaxEntConfig cfg;
        cfg.alpha = alpha;
        cfg.tolerance = 1e-13;
        const SoftSolution sol = soft_value_iteration(one, cfg);
        closed = std::max(closed, std::abs(sol.values.v[0] - alpha * std::numbers::ln2 / (1.0 - 0.9)));
    }
    const double t = seconds_since(t0);
    return {worst < 1e-6 && closed < 1e-9 && t < 5.0,
            "sup err " + fmt(worst) + ", closed-form err " + fmt(closed) + ", " + fmt(t) + " s"};
}

// Dyadic values keep sums exact.
std::vector<double> dyadic_row(Rng& rng, std::size_t n) {
    std::vector<double> q(n);
    for (double& x : q) x = static_cast<double>(static_cast<long>(rng.index(1 << 16)) - (1 << 15)) / 1024.0;
    return q;
}

Outcome property_suite() {
    const auto t0 = Clock::now();
    Rng rng(31337);
    std::size_t bad = 0;
    for (int c = 0; c < 10'000; ++c) {
        const std::size_t n = 2 + rng.index(199);
        const bool uniform = rng.bernoulli(0.5);
        std::vector<double> logits(n, rng.uniform(-5.0, 5.0));
        if (!uniform) logits[rng.index(n)] += rng.uniform(1e-3, 3.0);
        const double h = entropy_score(softmax_policy(logits, rng.uniform(0.05, 2.0)));
        if ((h == 0.0) != uniform) ++bad;
    }
    for (int c = 0; c < 10'000; ++c) {
        const std::size_t n = 1 + rng.index(200);
        std::vector<double> q = dyadic_row(rng, n);
        if (rng.bernoulli(0.5)) std::fill(q.begin(), q.end(), q[0]);
        bool constant = true;
        for (double x : q) constant = constant && x == q[0];
        if ((value_score(q) == 0.0) != constant) ++bad;
    }
    for (int c = 0; c < 10'000; ++c) {
        std::vector<double> q = dyadic_row(rng, 2 + rng.index(199));
        const double shift = static_cast<double>(static_cast<long>(rng.index(1 << 20)) - (1 << 19)) / 256.0;
        std::vector<double> shifted(q);
        for (double& x : shifted) x += shift;
        if (value_score(q) != value_score(shifted)) ++bad;
    }
    const double t = seconds_since(t0);
    return {bad == 0 && t < 5.0, "30000 cases, " + std::to_string(bad) + " violations, " + fmt(t) + " s"};
}

Outcome discretization() {
    const ActionGrid g = discretize(-1.0, 1.0, 200);
    bool spacing = true;
    for (std::size_t i = 0; i + 1 < g.points.size(); ++i)
        spacing = spacing && std::abs((g.points[i + 1] - g.points[i]) - 2.0 / 199.0) < 1e-15;
    const bool ok = g.points.size() == 200 && g.points.front() == -1.0 && g.points.back() == 1.0 && spacing &&
                    g.spacing() == 2.0 / 199.0;
    return {ok, "n " + std::to_string(g.points.size()) + ", endpoints " + fmt(g.points.front()) + " " +
                    fmt(g.points.back()) + ", spacing " + fmt(g.spacing(), 17)};
}

struct DrivingPolicies {
    std::shared_ptr<const NetworkPolicy> pi_a, pi_b;
    RunConfig config;
    double train_seconds = 0.0;
};

DrivingPolicies train_driving() {
    const auto t0 = Clock::now();
    DrivingPolicies out;
    out.config = layered_config("driving", {json{{"train", {{"seed", 1}}}}});
    auto env = make_env("driving", out.config.env_config);
    TrainConfig b = out.config.train;
    b.iterations = 3'000;
    out.pi_b = policy_from_checkpoint(train_soft_q(*env, b, out.config.env_config).checkpoint);
    TrainConfig a = out.config.train;
    a.iterations = 10'000;
    out.pi_a = policy_from_checkpoint(train_soft_q(*env, a, out.config.env_config).checkpoint);
    out.train_seconds = seconds_since(t0);
    return out;
}

Outcome pipeline_cardinalities(const DrivingPolicies& p) {
    const auto t0 = Clock::now();
    auto env = make_env("driving", p.config.env_config);
    SelectionConfig cfg;
    cfg.T = 10'000;
    cfg.frac = 0.1;
    cfg.k = 10;
    cfg.rollout_seed = 7;
    cfg.cluster_seed = 7;
    const SelectionResult sel = select_critical_states(*env, *p.pi_b, cfg);
    const CriticalStateDeck deck = build_critical_deck(*p.pi_b, *env, cfg, sel, p.config.env_config);
    const double t = seconds_since(t0);
    const CriticalStateDeck again = build_critical_deck(*p.pi_b, *env, cfg, p.config.env_config);

    const double p90 = oracle::percentile_linear(sel.buffer.scores, 90.0);
    bool above = true;
    std::set<std::size_t> clusters;
    for (const auto& e : deck.entries) {
        above = above && e.score >= p90 && sel.buffer.scores[*e.buffer_row] == e.score;
        clusters.insert(*e.cluster);
    }
    const bool ok = sel.buffer.size() == 10'000 && sel.filtered.size() == 1'000 && deck.entries.size() == 10 && above &&
                    clusters.size() == 10 && json(deck).dump() == json(again).dump() && t < 120.0;
    return {ok, "filtered " + std::to_string(sel.filtered.size()) + ", entries " + std::to_string(deck.entries.size()) +
                    ", clusters " + std::to_string(clusters.size()) + ", min score " +
                    fmt(deck.entries.empty() ? NAN : deck.entries.back().score, 5) + " >= p90 " + fmt(p90, 5) +
                    ", identical rerun " + (json(deck).dump() == json(again).dump() ? "yes" : "no") + ", " + fmt(t) +
                    " s"};
}

Outcome kmeans_fixture() {
    const json j = read_json_file(fs::path(CRITSTATE_FIXTURE_DIR) / "kmeans_8pt.json");
    const auto x = j.at("points").get<FeatureMatrix>();
    const auto k = j.at("k").get<std::size_t>();
    const double best = oracle::brute_force_inertia(x, k);
    const Clustering cl = kmeanspp(x, {k, 0, 300, 10});
    return {std::abs(cl.inertia - best) < 1e-12, "inertia " + fmt(cl.inertia, 12) + ", brute force " + fmt(best, 12)};
}

Outcome training_ordering(const DrivingPolicies& p) {
    const auto t0 = Clock::now();
    auto env = make_env("driving", p.config.env_config);
    const UniformPolicy random(env->spec().n_actions);
    const EvalMetrics r = evaluate(random, *env, 20'000, 5, 99);
    const EvalMetrics b = evaluate(*p.pi_b, *env, 20'000, 5, 99);
    const EvalMetrics a = evaluate(*p.pi_a, *env, 20'000, 5, 99);
    const double t = p.train_seconds + seconds_since(t0);
    const bool ok = r.mean_crashes_per_step > b.mean_crashes_per_step &&
                    b.mean_crashes_per_step >= a.mean_crashes_per_step && t < 900.0;
    return {ok, "crashes/step random " + fmt(r.mean_crashes_per_step, 4) + " > pi_B " +
                    fmt(b.mean_crashes_per_step, 4) + " >= pi_A " + fmt(a.mean_crashes_per_step, 4) + ", " + fmt(t) +
                    " s incl. training"};
}

Outcome chain_learning() {
    const RunConfig rc = layered_config("chain", {});
    auto env = make_env("chain", rc.env_config);
    const auto result = train_soft_q(*env, rc.train, rc.env_config);
    const auto& mdp = static_cast<const TabularEnv&>(*env).mdp();
    const auto q_star = oracle::soft_q_by_policy_iteration(to_oracle(mdp), rc.train.alpha);
    double err = 0.0;
    for (std::size_t s = 0; s < mdp.n_states(); ++s) {
        const auto q = result.checkpoint.network.q_values(one_hot(mdp.n_states(), s));
        for (std::size_t a = 0; a < mdp.n_actions(); ++a) err = std::max(err, std::abs(q[a] - q_star[s][a]));
    }
    return {err < 0.05 && rc.train.iterations <= 20'000,
            "sup err " + fmt(err) + " after " + std::to_string(rc.train.iterations) + " iterations"};
}

Outcome classification() {
    const bool table = classify_intervention(false, false) == 1 && classify_intervention(true, false) == 1 &&
                       classify_intervention(true, true) == 2 && classify_intervention(false, true) == 3;
    SessionConfig cfg;
    cfg.env_name = "pong";
    cfg.seed = 5;
    cfg.cutoff = 0.3;
    const auto pol = std::make_shared<const PongTrackerPolicy>();
    Session s("acceptance", pol, make_env("pong"), cfg, OracleCriticalSet::scripted("pong"));
    for (int t = 0; t < 1000; ++t) {
        const bool critical = s.annotation().in_oracle;
        Command cmd;
        if (critical && s.control() == ControlHolder::policy)
            cmd = Command::take_control(pol->distribution(s.observation()).argmax());
        else if (!critical && s.control() == ControlHolder::human)
            cmd = Command::release();
        s.step(cmd);
    }
    s.end();
    const SessionReport rep = s.report();
    return {table && rep.case_counts[0] == 0 && !rep.interventions.empty() && rep.total_steps == 1000,
            std::string("truth table ") + (table ? "ok" : "wrong") + ", interventions " +
                std::to_string(rep.interventions.size()) + ", case 1 " + std::to_string(rep.case_counts[0])};
}

Outcome gradient_check() {
    const std::vector<std::size_t> sizes{2, 4, 3};
    const QNetwork net(sizes, 3);
    Rng rng(11);
    const std::size_t batch = 6;
    Eigen::MatrixXd x(2, batch);
    std::vector<std::size_t> actions(batch);
    Eigen::VectorXd y(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        for (int j = 0; j < 2; ++j) x(j, i) = rng.uniform(-1.0, 1.0);
        actions[i] = rng.index(3);
        y(i) = rng.uniform(-1.0, 1.0);
    }
    const auto loss = [&](const oracle::Vec& params) {
        double l = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
            const auto q = oracle::mlp_forward(sizes, params, {x(0, i), x(1, i)});
            l += (q[actions[i]] - y(i)) * (q[actions[i]] - y(i));
        }
        return l / (2.0 * batch);
    };
    QNetwork::Gradient g;
    net.td_loss(x, actions, y, &g);
    std::vector<double> analytic;
    for (std::size_t l = 0; l < g.weights.size(); ++l) {
        for (Eigen::Index r = 0; r < g.weights[l].rows(); ++r)
            for (Eigen::Index c = 0; c < g.weights[l].cols(); ++c) analytic.push_back(g.weights[l](r, c));
        for (Eigen::Index r = 0; r < g.biases[l].size(); ++r) analytic.push_back(g.biases[l](r));
    }
    const auto fd = oracle::central_difference(loss, net.flat_parameters(), 1e-6);
    double worst = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i)
        worst = std::max(worst, std::abs(analytic[i] - fd[i]) / std::max(1e-8, std::abs(analytic[i]) + std::abs(fd[i])));
    return {analytic.size() == fd.size() && worst < 1e-4,
            std::to_string(fd.size()) + " parameters, max relative error " + fmt(worst)};
}

Outcome protocol_conformance() {
    const fs::path dir = fs::temp_directory_path() / ("critstate_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    const std::string cli = CRITSTATE_CLI_PATH;
    const auto fx = testing_support::run(cli + " fixtures --out " + (dir / "assets").string());
    if (fx.exit_code != 0) return {false, "fixtures exited " + std::to_string(fx.exit_code)};
    testing_support::Child server(
        {cli, "serve", "--port", "0", "--assets", (dir / "assets").string(), "--log-dir", (dir / "logs").string()});
    const std::string line = server.read_line();
    const std::string prefix = "listening on http://127.0.0.1:";
    if (line.rfind(prefix, 0) != 0) return {false, "unexpected banner: " + line};
    httplib::Client client("127.0.0.1", std::stoi(line.substr(prefix.size())));

    const auto fail = [&](const std::string& why) {
        server.stop();
        return Outcome{false, why};
    };
    const auto get = [&](const std::string& path) -> std::pair<int, std::string> {
        auto r = client.Get(path);
        return r ? std::pair{r->status, r->body} : std::pair{0, std::string()};
    };
    const auto post = [&](const std::string& path, const json& body) -> std::pair<int, json> {
        auto r = client.Post(path, body.dump(), "application/json");
        if (!r) return {0, json()};
        return {r->status, json::parse(r->body, nullptr, false)};
    };

    const auto [ds, decks_body] = get("/decks");
    if (ds != 200) return fail("GET /decks " + std::to_string(ds));
    std::string deck_id;
    const json catalogue = json::parse(decks_body);
    for (const auto& d : catalogue["decks"])
        if (d["condition"] == "correct") deck_id = d["id"];
    if (deck_id.empty()) return fail("no correct deck in catalogue");
    const auto [dd, deck_body] = get("/decks/" + deck_id);
    if (dd != 200 || json::parse(deck_body).get<CriticalStateDeck>().compute_id() != deck_id) return fail("deck fetch");
    if (get("/decks/" + deck_id + "/frames/0.png").first != 200) return fail("deck frame");
    const json decision = {{"client_id", "acceptance"}, {"decision", "deploy"}};
    if (post("/decks/" + deck_id + "/decision", decision).first != 201 ||
        post("/decks/" + deck_id + "/decision", decision).first != 200)
        return fail("decision not idempotent");

    const auto [ss, session] = post("/sessions", {{"policy_hash", "pong-tracker"}, {"deck_id", deck_id}, {"seed", 3}});
    if (ss != 201) return fail("POST /sessions " + std::to_string(ss));
    const std::string id = session["session_id"];
    const auto command = [&](const std::string& kind, json extra) {
        json payload = {{"command", kind}};
        payload.update(extra);
        return post("/sessions/" + id + "/stream", {{"type", "command"}, {"payload", payload}});
    };
    if (command("none", {{"repeat", 20}}).first != 200) return fail("stream none");
    const auto [ts, taken] = command("take_control", {{"action", 1}, {"repeat", 10}});
    if (ts != 200 || taken["envelopes"].back()["payload"]["last"]["control"] != "human") return fail("take_control");
    const auto [rs, released] = command("release", {{"repeat", 15}});
    if (rs != 200 || released["envelopes"].back()["payload"]["last"]["control"] != "policy") return fail("release");
    if (post("/sessions/" + id + "/end", json::object()).first != 200) return fail("end");

    const auto [rp, report_body] = get("/sessions/" + id + "/report");
    if (rp != 200) return fail("report " + std::to_string(rp));
    const json report = json::parse(report_body);
    server.stop();
    const SessionReport replay = report_from_log(read_event_log(dir / "logs" / (id + ".jsonl")));
    const bool ok = json(replay) == report && report["total_steps"] == 45 && report["interventions"].size() == 10;
    fs::remove_all(dir);
    return {ok, "steps " + report["total_steps"].dump() + ", interventions " +
                    std::to_string(report["interventions"].size()) + ", log replay " +
                    (json(replay) == report ? "matches" : "differs")};
}

}  // namespace

int main() {
    int failures = 0;
    const auto check = [&](int n, const std::string& name, const std::function<Outcome()>& f) {
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << n << "  " << name << "  (" << o.detail << ")"
                  << std::endl;
    };

    check(1, "soft Bellman oracle", soft_bellman_oracle);
    check(2, "criticality score properties", property_suite);
    check(3, "action discretization", discretization);

    std::optional<DrivingPolicies> driving;
    std::string train_error;
    try {
        driving = train_driving();
    } catch (const std::exception& e) {
        train_error = e.what();
    }
    const auto need_driving = [&](auto f) {
        return [&, f]() -> Outcome {
            if (!driving) return {false, "driving training failed: " + train_error};
            return f(*driving);
        };
    };
    check(4, "pipeline cardinalities", need_driving(pipeline_cardinalities));
    check(5, "k-means++ fixture optimum", kmeans_fixture);
    check(6, "training ordering", need_driving(training_ordering));
    check(7, "chain soft Q-learning", chain_learning);
    check(8, "intervention classification", classification);
    check(9, "TD gradient check", gradient_check);
    check(10, "takeover protocol end to end", protocol_conformance);
    return failures;
}
