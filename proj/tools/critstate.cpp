#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "critstate/config.hpp"
#include "critstate/envs/registry.hpp"
#include "critstate/exposure.hpp"
#include "critstate/mdp.hpp"
#include "critstate/server.hpp"
#include "critstate/soft_q.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace critstate;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// A config file may be a run config or a manifest carrying one.
json config_layer(const std::string& path) {
    if (path.empty()) return nullptr;
    json j = read_json_file(path);
    if (j.value("schema", std::string()) == "critstate.manifest/1") return j.at("config");
    return j;
}

void write_manifest(const fs::path& out, RunManifest m, Clock::time_point t0) {
    m.wall_seconds = seconds_since(t0);
    write_text_artifact(out / "manifest.json", json(m).dump(2) + "\n");
}

// Policies named on the command line: a checkpoint path or uniform:<env>.
struct LoadedPolicy {
    PolicyPtr policy;
    std::string env;
    json env_config = json::object();
    std::optional<ArtifactRef> input;
};

LoadedPolicy load_policy(const std::string& spec) {
    if (spec.rfind("uniform:", 0) == 0) {
        const std::string env = spec.substr(8);
        const auto e = make_env(env);
        return {std::make_shared<UniformPolicy>(e->spec().n_actions), env, json::object(), std::nullopt};
    }
    if (spec == "pong-tracker") return {std::make_shared<PongTrackerPolicy>(), "pong", json::object(), std::nullopt};
    auto ckpt = PolicyCheckpoint::load(spec);
    const std::string env = ckpt.env_name;
    const json cfg = ckpt.env_config;
    return {policy_from_checkpoint(std::move(ckpt)), env, cfg, hash_artifact(spec)};
}

// Subcommands -----------------------------------------------------------------------

struct TrainArgs {
    std::string env, config, out;
    std::optional<std::size_t> iterations;
    std::optional<std::uint64_t> seed;
    std::optional<double> alpha;
};

int cmd_train(const TrainArgs& a) {
    const auto t0 = Clock::now();
    json flags = json::object();
    if (a.iterations) flags["train"]["iterations"] = *a.iterations;
    if (a.seed) flags["train"]["seed"] = *a.seed;
    if (a.alpha) flags["train"]["alpha"] = *a.alpha;
    flags["env"] = a.env;
    const RunConfig cfg = layered_config(a.env, {config_layer(a.config), flags});

    const fs::path out = a.out.empty() ? fs::path(cfg.env + "-s" + std::to_string(cfg.train.seed) + "-i" +
                                                  std::to_string(cfg.train.iterations))
                                       : fs::path(a.out);
    fs::create_directories(out);
    auto env = make_env(cfg.env, cfg.env_config);
    std::ostringstream metrics;
    std::cerr << "training " << cfg.env << " for " << cfg.train.iterations << " iterations (seed " << cfg.train.seed << ")\n";
    const TrainResult r = train_soft_q(*env, cfg.train, cfg.env_config, [&](const TrainMetrics& m) {
        metrics << json(m).dump() << '\n';
        std::cerr << "  iter " << m.iteration << "  reward/step " << m.average_reward << "  crash/step " << m.crash_rate
                  << "  td " << m.td_loss << '\n';
    });

    RunManifest m;
    m.command = "train";
    m.config = cfg;
    m.started_at = utc_timestamp();
    const auto ckpt_bytes = r.checkpoint.serialize();
    const auto ck = write_artifact(out / "policy.ckpt", ckpt_bytes);
    const auto mt = write_text_artifact(out / "metrics.jsonl", metrics.str());
    m.outputs = {{ck.path, ck.sha256}, {mt.path, mt.sha256}};
    write_manifest(out, m, t0);
    std::cout << (out / "policy.ckpt").string() << "\n" << "policy_hash " << r.checkpoint.hash << "\n";
    return 0;
}

struct DeckArgs {
    std::string checkpoint, config, out, mode = "critical", method;
    std::optional<std::size_t> T, k;
    std::optional<double> frac;
    std::optional<std::uint64_t> seed;
};

int cmd_deck(const DeckArgs& a) {
    const auto t0 = Clock::now();
    if (a.k && *a.k == 0) throw UsageError("--k must be at least 1");
    if (a.mode != "critical" && a.mode != "random") throw UsageError("--mode must be critical or random");
    const LoadedPolicy p = load_policy(a.checkpoint);
    json flags = json::object();
    if (a.T) flags["selection"]["T"] = *a.T;
    if (a.k) flags["selection"]["k"] = *a.k;
    if (a.frac) flags["selection"]["frac"] = *a.frac;
    if (!a.method.empty()) flags["selection"]["method"] = to_string(criticality_method_from_string(a.method));
    if (a.seed) {
        flags["selection"]["rollout_seed"] = *a.seed;
        flags["selection"]["cluster_seed"] = *a.seed;
    }
    json file = config_layer(a.config);
    if (file.is_object()) file.erase("env_config");
    RunConfig cfg = layered_config(p.env, {file, flags});
    cfg.env_config = p.env_config;
    if (cfg.selection.method == CriticalityMethod::value_based && !p.policy->q_row(make_env(p.env, p.env_config)->observation()))
        throw std::runtime_error("value-based scoring needs a policy with a Q-row");

    const auto env = make_env(p.env, p.env_config);
    std::cerr << "collecting " << cfg.selection.T << " states from " << p.policy->id().substr(0, 12) << "\n";
    const CriticalStateDeck deck =
        a.mode == "critical"
            ? build_critical_deck(*p.policy, *env, cfg.selection, p.env_config)
            : build_random_deck(*p.policy, *env, cfg.selection.k, cfg.selection.rollout_seed, cfg.selection, p.env_config);
    if (const auto w = deck.provenance.find("warnings"); w != deck.provenance.end())
        for (const auto& msg : *w) std::cerr << "warning: " << msg.get<std::string>() << "\n";

    const fs::path out = a.out.empty() ? fs::path("deck-" + deck.id.substr(0, 12)) : fs::path(a.out);
    RunManifest m;
    m.command = "deck --mode " + a.mode;
    m.config = cfg;
    m.started_at = utc_timestamp();
    if (p.input) m.inputs.push_back(*p.input);
    for (const auto& f : write_deck(deck, out)) m.outputs.push_back({f.path, f.sha256});
    write_manifest(out, m, t0);
    std::cout << (out / "deck.json").string() << "\n" << "deck_id " << deck.id << "\n" << "entries " << deck.entries.size() << "\n";
    return 0;
}

struct EvalArgs {
    std::vector<std::string> policies;
    std::string config, json_out;
    std::optional<std::size_t> steps, seeds;
    std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs& a) {
    json rows = json::array();
    std::cout << std::left << std::setw(18) << "policy" << std::setw(8) << "seeds" << std::setw(10) << "steps"
              << std::setw(26) << "crashes/step (+-se)" << "return/step (+-se)\n";
    for (const auto& spec : a.policies) {
        const LoadedPolicy p = load_policy(spec);
        json flags = json::object();
        if (a.steps) flags["eval"]["steps"] = *a.steps;
        if (a.seeds) flags["eval"]["seeds"] = *a.seeds;
        if (a.seed) flags["eval"]["seed"] = *a.seed;
        json file = config_layer(a.config);
        if (file.is_object()) file.erase("env_config");
        const RunConfig cfg = layered_config(p.env, {file, flags});
        const auto env = make_env(p.env, p.env_config);
        const EvalMetrics em = evaluate(*p.policy, *env, cfg.eval.steps, cfg.eval.seeds, cfg.eval.seed);
        std::ostringstream crash, ret;
        crash << std::setprecision(5) << em.mean_crashes_per_step << " +- " << em.stderr_crashes_per_step;
        ret << std::setprecision(5) << em.mean_return_per_step << " +- " << em.stderr_return_per_step;
        std::cout << std::left << std::setw(18) << p.policy->id().substr(0, 16) << std::setw(8) << cfg.eval.seeds
                  << std::setw(10) << cfg.eval.steps << std::setw(26) << crash.str() << ret.str() << "\n";
        json row = em;
        row["policy"] = spec;
        row["policy_hash"] = p.policy->id();
        rows.push_back(row);
    }
    if (!a.json_out.empty()) write_text_artifact(a.json_out, rows.dump(2) + "\n");
    return 0;
}

struct OracleArgs {
    std::string mdp;
    std::optional<double> alpha;
    double tolerance = 1e-8;
    int precision = 10;
};

int cmd_oracle(const OracleArgs& a) {
    const json j = read_json_file(a.mdp);
    const TabularMDP mdp = tabular_mdp_from_json(j);
    MaxEntConfig cfg;
    cfg.alpha = a.alpha.value_or(j.value("alpha", 1.0));
    cfg.discount = mdp.discount();
    cfg.tolerance = a.tolerance;
    const SoftSolution sol = soft_value_iteration(mdp, cfg);
    std::cout << std::setprecision(a.precision);
    std::cout << "alpha " << cfg.alpha << " discount " << cfg.discount << " iterations " << sol.iterations << "\n";
    for (std::size_t s = 0; s < mdp.n_states(); ++s) {
        std::cout << "state " << s << "  V* " << sol.values.v[s] << "  Q*";
        for (std::size_t x = 0; x < mdp.n_actions(); ++x) std::cout << ' ' << sol.values.q(s, x);
        std::cout << "  pi*";
        for (double p : sol.policy[s].probabilities()) std::cout << ' ' << p;
        std::cout << "\n";
    }
    return 0;
}

struct RecordArgs {
    std::string checkpoint, out;
    double seconds = 60.0;
    std::uint64_t seed = 0;
};

int cmd_record(const RecordArgs& a) {
    const auto t0 = Clock::now();
    if (!(a.seconds > 0.0)) throw UsageError("--seconds must be positive");
    const LoadedPolicy p = load_policy(a.checkpoint);
    const auto env = make_env(p.env, p.env_config);
    const auto steps = static_cast<std::size_t>(std::llround(a.seconds * kRecordingStepsPerSecond));
    const RolloutRecording rec = record_rollout(*p.policy, *env, steps, a.seed);
    const fs::path out = a.out.empty() ? fs::path("recording-" + rec.id.substr(0, 12)) : fs::path(a.out);
    RunManifest m;
    m.command = "record";
    m.config = {{"env", p.env}, {"env_config", p.env_config}, {"seconds", a.seconds}, {"seed", a.seed}};
    m.started_at = utc_timestamp();
    if (p.input) m.inputs.push_back(*p.input);
    for (const auto& f : write_recording(rec, out)) m.outputs.push_back({f.path, f.sha256});
    write_manifest(out, m, t0);
    std::cout << (out / "recording.json").string() << "\n" << "steps " << rec.duration_steps << "\n";
    return 0;
}

int cmd_fixtures(const std::string& out_dir) {
    const auto t0 = Clock::now();
    const fs::path out = out_dir.empty() ? fs::path("pong-decks") : fs::path(out_dir);
    RunManifest m;
    m.command = "fixtures";
    m.started_at = utc_timestamp();
    for (const auto& [name, deck] : pong_condition_decks()) {
        for (const auto& f : write_deck(deck, out / name)) m.outputs.push_back({f.path, f.sha256});
        std::cout << name << ' ' << deck.id << "\n";
    }
    write_manifest(out, m, t0);
    return 0;
}

TakeoverService* g_service = nullptr;

extern "C" void on_signal(int) {
    if (g_service) g_service->stop();
}

struct ServeArgs {
    std::string host = "127.0.0.1", assets, log_dir;
    int port = 8080;
    std::size_t step_timeout_ms = 0;
};

int cmd_serve(const ServeArgs& a) {
    if (a.port < 0 || a.port > 65535) throw UsageError("--port must be in [0, 65535]");
    ServiceOptions opt;
    if (!a.assets.empty()) opt.assets = a.assets;
    if (!a.log_dir.empty()) opt.log_dir = fs::path(a.log_dir);
    opt.step_timeout_ms = a.step_timeout_ms;
    TakeoverService svc(opt);
    const int port = svc.bind(a.host, a.port);
    std::cout << "listening on http://" << a.host << ":" << port << std::endl;
    g_service = &svc;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    svc.listen();
    g_service = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Critical-state pipeline: train, score, select, export, serve, evaluate."};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a soft Q-learning policy");
    t->add_option("env", train.env, "Environment")->required()->check(CLI::IsMember(known_envs()));
    t->add_option("--iterations", train.iterations, "Training iterations");
    t->add_option("--seed", train.seed, "Training seed");
    t->add_option("--alpha", train.alpha, "Entropy temperature")->check(CLI::PositiveNumber);
    t->add_option("--config", train.config, "Run config or manifest")->check(CLI::ExistingFile);
    t->add_option("--out", train.out, "Output directory");

    DeckArgs deck;
    auto* d = app.add_subcommand("deck", "Export a critical-state or random deck");
    d->add_option("checkpoint", deck.checkpoint, "Checkpoint path, uniform:<env> or pong-tracker")->required();
    d->add_option("--mode", deck.mode, "critical or random")->check(CLI::IsMember({"critical", "random"}));
    d->add_option("--T", deck.T, "Rollout length");
    d->add_option("--frac", deck.frac, "Fraction kept before clustering");
    d->add_option("--k", deck.k, "Deck size");
    d->add_option("--method", deck.method, "value_based or entropy_based");
    d->add_option("--seed", deck.seed, "Rollout and clustering seed");
    d->add_option("--config", deck.config, "Run config or manifest")->check(CLI::ExistingFile);
    d->add_option("--out", deck.out, "Output directory");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Crash and return rates across seeds");
    e->add_option("policies", eval.policies, "Checkpoints or uniform:<env>")->required();
    e->add_option("--steps", eval.steps, "Steps per seed");
    e->add_option("--seeds", eval.seeds, "Number of seeds");
    e->add_option("--seed", eval.seed, "Base seed");
    e->add_option("--config", eval.config, "Run config or manifest")->check(CLI::ExistingFile);
    e->add_option("--json", eval.json_out, "Also write the metrics as JSON");

    OracleArgs oracle;
    auto* o = app.add_subcommand("oracle", "Exact soft values of a tabular MDP file");
    o->add_option("mdp", oracle.mdp, "MDP JSON file")->required()->check(CLI::ExistingFile);
    o->add_option("--alpha", oracle.alpha, "Temperature (default: file, else 1)")->check(CLI::PositiveNumber);
    o->add_option("--tolerance", oracle.tolerance, "Convergence tolerance");
    o->add_option("--precision", oracle.precision, "Printed significant digits");

    RecordArgs record;
    auto* r = app.add_subcommand("record", "Timed rollout recording");
    r->add_option("checkpoint", record.checkpoint, "Checkpoint path, uniform:<env> or pong-tracker")->required();
    r->add_option("--seconds", record.seconds, "Duration at 10 steps per second");
    r->add_option("--seed", record.seed, "Rollout seed");
    r->add_option("--out", record.out, "Output directory");

    std::string fixtures_out;
    auto* f = app.add_subcommand("fixtures", "Write the five Pong condition decks");
    f->add_option("--out", fixtures_out, "Output directory");

    ServeArgs serve;
    auto* s = app.add_subcommand("serve", "Run the takeover service");
    s->add_option("--port", serve.port, "Port; 0 binds an ephemeral one");
    s->add_option("--host", serve.host, "Bind address");
    s->add_option("--assets", serve.assets, "Directory scanned for decks and checkpoints")->check(CLI::ExistingDirectory);
    s->add_option("--log-dir", serve.log_dir, "Per-session event logs");
    s->add_option("--step-timeout-ms", serve.step_timeout_ms, "Advertised step timeout for clients");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*t) return cmd_train(train);
        if (*d) return cmd_deck(deck);
        if (*e) return cmd_eval(eval);
        if (*o) return cmd_oracle(oracle);
        if (*r) return cmd_record(record);
        if (*f) return cmd_fixtures(fixtures_out);
        if (*s) return cmd_serve(serve);
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << "\n";
        return 2;
    } catch (const TrainingDiverged& err) {
        std::cerr << "training diverged: " << err.what() << "\n";
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 2;
}
