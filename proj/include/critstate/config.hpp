#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/selection.hpp"
#include "critstate/sha256.hpp"
#include "critstate/soft_q.hpp"

namespace critstate {

inline constexpr const char* kToolVersion = "0.1.0";

struct EvalConfig {
    std::size_t steps = 20'000;
    std::size_t seeds = 5;
    std::uint64_t seed = 99;
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
    j = {{"steps", c.steps}, {"seeds", c.seeds}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.seeds = j.value("seeds", c.seeds);
    c.seed = j.value("seed", c.seed);
}

/// Everything one command needs; each block is optional in files.
struct RunConfig {
    std::string env = "driving";
    nlohmann::json env_config = nlohmann::json::object();
    TrainConfig train;
    SelectionConfig selection;
    EvalConfig eval;
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"env", c.env}, {"env_config", c.env_config}, {"train", c.train}, {"selection", c.selection}, {"eval", c.eval}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    c.env = j.value("env", c.env);
    c.env_config = j.value("env_config", c.env_config);
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    if (j.contains("selection")) c.selection = j["selection"].get<SelectionConfig>();
    if (j.contains("eval")) c.eval = j["eval"].get<EvalConfig>();
}

/// Built-in defaults per environment, identical to configs/<env>.json.
inline nlohmann::json preset(const std::string& env) {
    RunConfig c;
    c.env = env;
    if (env == "driving") {
        c.train.optimizer = OptimizerKind::adam;
        c.train.learning_rate = 1e-3;
        c.train.alpha = 0.1;
        c.train.discount = 0.95;
        c.train.batch_size = 32;
        c.train.basis_knots = 5;
        c.train.steps_per_iteration = 4;
        c.train.target_update_period = 100;
        c.train.iterations = 10'000;
    } else if (env == "chain") {
        c.env_config = {{"discount", 0.9}};
        c.train.alpha = 1.0;
        c.train.discount = 0.9;
        c.train.learning_rate = 1e-2;
        c.train.iterations = 20'000;
    } else if (env == "pong") {
        c.train.alpha = 0.1;
        c.train.discount = 0.95;
        c.train.optimizer = OptimizerKind::adam;
    } else {
        throw std::invalid_argument("unknown environment: " + env);
    }
    return c;
}

/// Later layers override earlier ones key by key (RFC 7396 merge patch).
inline RunConfig layered_config(const std::string& env, const std::vector<nlohmann::json>& layers) {
    nlohmann::json merged = preset(env);
    for (const auto& l : layers)
        if (!l.is_null()) merged.merge_patch(l);
    return merged.get<RunConfig>();
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return nlohmann::json::parse(in);
}

// Run manifests ---------------------------------------------------------------------

struct ArtifactRef {
    std::string path;
    std::string sha256;
};

inline void to_json(nlohmann::json& j, const ArtifactRef& a) { j = {{"path", a.path}, {"sha256", a.sha256}}; }

inline void from_json(const nlohmann::json& j, ArtifactRef& a) {
    a.path = j.at("path").get<std::string>();
    a.sha256 = j.at("sha256").get<std::string>();
}

/// Config snapshot, hashed inputs and outputs, and timings. Timestamps live
/// only here, never inside artifacts.
struct RunManifest {
    std::string tool_version = kToolVersion;
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::vector<ArtifactRef> inputs;
    std::vector<ArtifactRef> outputs;
    double wall_seconds = 0.0;
    std::string started_at;
};

inline void to_json(nlohmann::json& j, const RunManifest& m) {
    j = {{"schema", "critstate.manifest/1"},
         {"tool_version", m.tool_version},
         {"command", m.command},
         {"config", m.config},
         {"inputs", m.inputs},
         {"outputs", m.outputs},
         {"timings", {{"wall_seconds", m.wall_seconds}, {"started_at", m.started_at}}}};
}

inline void from_json(const nlohmann::json& j, RunManifest& m) {
    m.tool_version = j.at("tool_version").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.inputs = j.at("inputs").get<std::vector<ArtifactRef>>();
    m.outputs = j.at("outputs").get<std::vector<ArtifactRef>>();
    m.wall_seconds = j.at("timings").value("wall_seconds", 0.0);
    m.started_at = j.at("timings").value("started_at", std::string());
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline ArtifactRef hash_artifact(const std::filesystem::path& path) { return {path.string(), sha256_file(path.string())}; }

}  // namespace critstate
