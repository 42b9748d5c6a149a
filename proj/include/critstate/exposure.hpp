#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/criticality.hpp"
#include "critstate/env.hpp"
#include "critstate/envs/pong.hpp"
#include "critstate/envs/registry.hpp"
#include "critstate/policy.hpp"
#include "critstate/render.hpp"
#include "critstate/rng.hpp"
#include "critstate/rollout.hpp"
#include "critstate/selection.hpp"
#include "critstate/sha256.hpp"

namespace critstate {

inline constexpr const char* kDeckSchema = "critstate.deck/1";
inline constexpr const char* kRecordingSchema = "critstate.recording/1";
inline constexpr double kRecordingStepsPerSecond = 10.0;

inline std::string frame_name(std::size_t i, int width = 3) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frames/%0*zu.png", width, i);
    return buf;
}

/// Marks a displayed action that was set by hand rather than taken from the
/// policy's distribution.
struct ActionOverride {
    std::size_t original_action = 0;
    std::string note;
    bool operator==(const ActionOverride&) const = default;
};

struct DeckEntry {
    std::string label;  // free-form, e.g. a query-state name
    std::vector<double> observation;
    nlohmann::json scene;
    std::string frame;  // path relative to the deck file
    std::size_t displayed_action = 0;
    double displayed_action_value = 0.0;
    std::vector<double> distribution;
    std::optional<std::vector<double>> q_row;
    double score = 0.0;
    bool above_threshold = false;
    std::optional<std::size_t> cluster;
    std::optional<std::size_t> buffer_row;
    std::optional<ActionOverride> override_action;
    bool injected = false;

    bool operator==(const DeckEntry&) const = default;
};

/// Ordered, rendered set of states shown to a user. The id is the SHA-256 of
/// the canonical JSON with `id` and `created_at` removed.
struct CriticalStateDeck {
    std::string schema = kDeckSchema;
    std::string id;
    std::string kind;    // critical | random | fixture
    std::string method;  // value_based | entropy_based | random
    std::string score_method;
    std::string policy_hash;
    std::string env_name;
    nlohmann::json env_config = nlohmann::json::object();
    std::vector<double> action_values;
    double cutoff = 0.0;
    std::vector<DeckEntry> entries;
    nlohmann::json provenance = nlohmann::json::object();
    std::optional<std::string> created_at;

    bool operator==(const CriticalStateDeck&) const = default;

    std::string compute_id() const;
    void seal();
};

inline void to_json(nlohmann::json& j, const ActionOverride& o) {
    j = {{"synthetic", true}, {"original_action", o.original_action}, {"note", o.note}};
}

inline void from_json(const nlohmann::json& j, ActionOverride& o) {
    o.original_action = j.at("original_action").get<std::size_t>();
    o.note = j.value("note", std::string());
}

namespace detail {

template <class T>
nlohmann::json opt_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <class T>
std::optional<T> opt_from(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<T>();
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const DeckEntry& e) {
    j = {{"label", e.label},
         {"observation", e.observation},
         {"scene", e.scene},
         {"frame", e.frame},
         {"displayed_action", e.displayed_action},
         {"displayed_action_value", e.displayed_action_value},
         {"distribution", e.distribution},
         {"q_row", detail::opt_json(e.q_row)},
         {"score", e.score},
         {"above_threshold", e.above_threshold},
         {"cluster", detail::opt_json(e.cluster)},
         {"buffer_row", detail::opt_json(e.buffer_row)},
         {"override", detail::opt_json(e.override_action)},
         {"injected", e.injected}};
}

inline void from_json(const nlohmann::json& j, DeckEntry& e) {
    e.label = j.value("label", std::string());
    e.observation = j.at("observation").get<std::vector<double>>();
    e.scene = j.value("scene", nlohmann::json());
    e.frame = j.value("frame", std::string());
    e.displayed_action = j.at("displayed_action").get<std::size_t>();
    e.displayed_action_value = j.value("displayed_action_value", 0.0);
    e.distribution = j.at("distribution").get<std::vector<double>>();
    e.q_row = detail::opt_from<std::vector<double>>(j, "q_row");
    e.score = j.at("score").get<double>();
    e.above_threshold = j.value("above_threshold", false);
    e.cluster = detail::opt_from<std::size_t>(j, "cluster");
    e.buffer_row = detail::opt_from<std::size_t>(j, "buffer_row");
    e.override_action = detail::opt_from<ActionOverride>(j, "override");
    e.injected = j.value("injected", false);
}

inline void to_json(nlohmann::json& j, const CriticalStateDeck& d) {
    j = {{"schema", d.schema},
         {"id", d.id},
         {"kind", d.kind},
         {"method", d.method},
         {"score_method", d.score_method},
         {"policy_hash", d.policy_hash},
         {"env", d.env_name},
         {"env_config", d.env_config},
         {"action_values", d.action_values},
         {"cutoff", d.cutoff},
         {"entries", d.entries},
         {"provenance", d.provenance},
         {"created_at", detail::opt_json(d.created_at)}};
}

inline void from_json(const nlohmann::json& j, CriticalStateDeck& d) {
    d.schema = j.value("schema", std::string(kDeckSchema));
    if (d.schema.rfind("critstate.deck/", 0) != 0) throw std::invalid_argument("not a deck document: " + d.schema);
    d.id = j.value("id", std::string());
    d.kind = j.value("kind", std::string());
    d.method = j.value("method", std::string());
    d.score_method = j.value("score_method", std::string());
    d.policy_hash = j.value("policy_hash", std::string());
    d.env_name = j.at("env").get<std::string>();
    d.env_config = j.value("env_config", nlohmann::json::object());
    d.action_values = j.at("action_values").get<std::vector<double>>();
    d.cutoff = j.value("cutoff", 0.0);
    d.entries = j.at("entries").get<std::vector<DeckEntry>>();
    d.provenance = j.value("provenance", nlohmann::json::object());
    d.created_at = detail::opt_from<std::string>(j, "created_at");
}

inline std::string CriticalStateDeck::compute_id() const {
    nlohmann::json j = *this;
    j.erase("id");
    j.erase("created_at");
    return sha256_hex(j.dump());
}

inline void CriticalStateDeck::seal() {
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].frame = frame_name(i);
    id = compute_id();
}

/// Checks the schema-level invariants; throws on the first violation.
inline void validate_deck(const CriticalStateDeck& d) {
    const std::size_t n = d.action_values.size();
    for (std::size_t i = 0; i < d.entries.size(); ++i) {
        const auto& e = d.entries[i];
        if (e.distribution.size() != n) throw std::invalid_argument("deck entry " + std::to_string(i) + ": distribution size");
        if (e.displayed_action >= n) throw std::invalid_argument("deck entry " + std::to_string(i) + ": action out of range");
        if (!e.override_action && e.displayed_action != ActionDistribution(e.distribution).argmax())
            throw std::invalid_argument("deck entry " + std::to_string(i) + ": displayed action is not the mode");
    }
    if (!d.id.empty() && d.id != d.compute_id()) throw std::invalid_argument("deck id does not match content");
}

// Builders ------------------------------------------------------------------------

/// Deck entry for one state: mode of the policy as displayed action, full
/// distribution and (when available) Q-row.
inline DeckEntry make_entry(const PolicySnapshot& policy, std::span<const double> observation,
                            const nlohmann::json& scene, double score, double cutoff,
                            const std::vector<double>& action_values) {
    DeckEntry e;
    e.observation.assign(observation.begin(), observation.end());
    e.scene = scene;
    const ActionDistribution dist = policy.distribution(observation);
    e.distribution = dist.probabilities();
    e.q_row = policy.q_row(observation);
    e.displayed_action = dist.argmax();
    e.displayed_action_value = action_values.at(e.displayed_action);
    e.score = score;
    e.above_threshold = is_critical(score, cutoff);
    return e;
}

inline DeckEntry make_entry(const PolicySnapshot& policy, const Environment& state, CriticalityMethod method,
                            double cutoff, const EntropyOptions& opt = {}) {
    const auto obs = state.observation();
    const double score = score_state(policy, obs, method, 0, opt).value;
    return make_entry(policy, obs, state.scene(), score, cutoff, state.action_values());
}

/// Deck from a finished selection run.
inline CriticalStateDeck build_critical_deck(const PolicySnapshot& policy, const Environment& env,
                                             const SelectionConfig& cfg, const SelectionResult& sel,
                                             const nlohmann::json& env_config = nlohmann::json::object()) {
    CriticalStateDeck d;
    d.kind = "critical";
    d.method = to_string(cfg.method);
    d.score_method = to_string(cfg.method);
    d.policy_hash = policy.id();
    d.env_name = env.name();
    d.env_config = env_config;
    d.action_values = env.action_values();
    d.cutoff = sel.cutoff;
    for (const auto& rep : sel.representatives) {
        DeckEntry e = make_entry(policy, sel.buffer.observation(rep.row), sel.buffer.scene(rep.row), rep.score,
                                 sel.cutoff, d.action_values);
        e.cluster = rep.cluster;
        e.buffer_row = rep.row;
        d.entries.push_back(std::move(e));
    }
    d.provenance = {{"pipeline", cfg},
                    {"buffer_size", sel.buffer.size()},
                    {"filtered", sel.filtered.size()},
                    {"effective_k", sel.clustering.k},
                    {"inertia", sel.clustering.inertia},
                    {"warnings", sel.clustering.warnings}};
    d.seal();
    return d;
}

inline CriticalStateDeck build_critical_deck(const PolicySnapshot& policy, const Environment& env,
                                             const SelectionConfig& cfg,
                                             const nlohmann::json& env_config = nlohmann::json::object()) {
    return build_critical_deck(policy, env, cfg, select_critical_states(env, policy, cfg), env_config);
}

/// k rows drawn uniformly without replacement from a fresh rollout buffer of
/// cfg.T steps (rollout seed `seed`), scored but not filtered.
inline CriticalStateDeck build_random_deck(const PolicySnapshot& policy, const Environment& env, std::size_t k,
                                           std::uint64_t seed, SelectionConfig cfg = {},
                                           const nlohmann::json& env_config = nlohmann::json::object()) {
    if (k == 0) throw std::invalid_argument("build_random_deck: k must be positive");
    cfg.k = k;
    cfg.rollout_seed = seed;
    cfg.validate();
    if (k > cfg.T) throw std::invalid_argument("build_random_deck: k exceeds the buffer size");
    const StateBuffer buf = collect_states(env, policy, cfg.T, seed, {cfg.method, {cfg.exclude_boundary_actions}, true});
    const double cutoff = resolve_threshold(buf.scores, cfg.threshold);

    Rng rng(derive_seed(seed, 7));
    std::vector<std::size_t> rows(buf.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(rows[i], rows[i + rng.index(rows.size() - i)]);
    rows.resize(k);
    std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        return buf.scores[a] > buf.scores[b] || (buf.scores[a] == buf.scores[b] && a < b);
    });

    CriticalStateDeck d;
    d.kind = "random";
    d.method = "random";
    d.score_method = to_string(cfg.method);
    d.policy_hash = policy.id();
    d.env_name = env.name();
    d.env_config = env_config;
    d.action_values = env.action_values();
    d.cutoff = cutoff;
    for (std::size_t r : rows) {
        DeckEntry e = make_entry(policy, buf.observation(r), buf.scene(r), buf.scores[r], cutoff, d.action_values);
        e.buffer_row = r;
        d.entries.push_back(std::move(e));
    }
    d.provenance = {{"pipeline", cfg}, {"buffer_size", buf.size()}, {"sample_seed", seed}};
    d.seal();
    return d;
}

// Editing -------------------------------------------------------------------------

struct DeckEdit {
    std::vector<std::size_t> removals;                             // entry indices
    std::vector<DeckEntry> injections;                             // appended in order
    std::vector<std::pair<std::size_t, std::size_t>> overrides;    // (entry index, displayed action)
    std::string note;

    bool empty() const { return removals.empty() && injections.empty() && overrides.empty(); }
};

inline nlohmann::json edit_script(const DeckEdit& e) {
    nlohmann::json inj = nlohmann::json::array();
    for (const auto& x : e.injections) inj.push_back({{"label", x.label}, {"observation", x.observation}});
    nlohmann::json ov = nlohmann::json::array();
    for (const auto& [i, a] : e.overrides) ov.push_back({{"entry", i}, {"action", a}});
    return {{"removals", e.removals}, {"injections", inj}, {"overrides", ov}, {"note", e.note}};
}

/// Overrides and removals refer to indices of the input deck. Overrides are
/// applied first, then removals; injections are appended after the surviving
/// entries in the order given.
inline CriticalStateDeck edit_deck(const CriticalStateDeck& deck, const DeckEdit& edit) {
    const std::size_t n_actions = deck.action_values.size();
    for (std::size_t i : edit.removals)
        if (i >= deck.entries.size()) throw std::out_of_range("edit_deck: removal index out of range");
    for (const auto& [i, a] : edit.overrides) {
        if (i >= deck.entries.size()) throw std::out_of_range("edit_deck: override index out of range");
        if (a >= n_actions) throw std::out_of_range("edit_deck: override action outside the action set");
    }
    for (const auto& e : edit.injections) {
        if (e.distribution.size() != n_actions) throw std::invalid_argument("edit_deck: injected distribution size");
        if (e.displayed_action >= n_actions) throw std::out_of_range("edit_deck: injected action outside the action set");
    }

    CriticalStateDeck out = deck;
    for (const auto& [i, a] : edit.overrides) {
        auto& e = out.entries[i];
        const std::size_t original = e.override_action ? e.override_action->original_action : e.displayed_action;
        e.override_action = ActionOverride{original, "synthetic displayed action"};
        e.displayed_action = a;
        e.displayed_action_value = deck.action_values[a];
    }
    const std::set<std::size_t> removed(edit.removals.begin(), edit.removals.end());
    std::vector<DeckEntry> kept;
    for (std::size_t i = 0; i < out.entries.size(); ++i)
        if (!removed.count(i)) kept.push_back(std::move(out.entries[i]));
    for (auto e : edit.injections) {
        e.injected = true;
        kept.push_back(std::move(e));
    }
    out.entries = std::move(kept);

    nlohmann::json history = deck.provenance.value("edits", nlohmann::json::array());
    history.push_back(edit_script(edit));
    out.provenance["edits"] = history;
    out.provenance["source_deck"] = deck.id;
    out.seal();
    return out;
}

// Recordings ----------------------------------------------------------------------

struct RolloutRecording {
    std::string schema = kRecordingSchema;
    std::string id;
    std::string env_name;
    std::string policy_hash;
    std::uint64_t seed = 0;
    std::size_t duration_steps = 0;
    double steps_per_second = kRecordingStepsPerSecond;
    std::vector<nlohmann::json> scenes;  // one per frame: the state before each action
    std::vector<std::string> frames;
    std::vector<std::size_t> actions;
    std::vector<double> rewards;
    std::vector<bool> crashes;

    bool operator==(const RolloutRecording&) const = default;

    std::string compute_id() const;
};

inline void to_json(nlohmann::json& j, const RolloutRecording& r) {
    j = {{"schema", r.schema},       {"id", r.id},
         {"env", r.env_name},        {"policy_hash", r.policy_hash},
         {"seed", r.seed},           {"duration_steps", r.duration_steps},
         {"steps_per_second", r.steps_per_second},
         {"frames", r.frames},       {"actions", r.actions},
         {"rewards", r.rewards},     {"crashes", r.crashes},
         {"scenes", r.scenes}};
}

inline void from_json(const nlohmann::json& j, RolloutRecording& r) {
    r.schema = j.value("schema", std::string(kRecordingSchema));
    r.id = j.value("id", std::string());
    r.env_name = j.at("env").get<std::string>();
    r.policy_hash = j.value("policy_hash", std::string());
    r.seed = j.value("seed", std::uint64_t{0});
    r.duration_steps = j.at("duration_steps").get<std::size_t>();
    r.steps_per_second = j.value("steps_per_second", kRecordingStepsPerSecond);
    r.frames = j.at("frames").get<std::vector<std::string>>();
    r.actions = j.at("actions").get<std::vector<std::size_t>>();
    r.rewards = j.at("rewards").get<std::vector<double>>();
    r.crashes = j.value("crashes", std::vector<bool>(r.actions.size(), false));
    r.scenes = j.value("scenes", std::vector<nlohmann::json>{});
}

inline std::string RolloutRecording::compute_id() const {
    nlohmann::json j = *this;
    j.erase("id");
    return sha256_hex(j.dump());
}

/// On-policy rollout of `duration_steps` steps; frame i shows the state in
/// which action i was taken.
inline RolloutRecording record_rollout(const PolicySnapshot& policy, const Environment& env,
                                       std::size_t duration_steps, std::uint64_t seed) {
    if (duration_steps == 0) throw std::invalid_argument("record_rollout: duration must be at least one step");
    auto sim = env.clone();
    RolloutCursor cursor(*sim, policy, seed);
    RolloutRecording rec;
    rec.env_name = env.name();
    rec.policy_hash = policy.id();
    rec.seed = seed;
    rec.duration_steps = duration_steps;
    for (std::size_t t = 0; t < duration_steps; ++t) {
        rec.scenes.push_back(cursor.env().scene());
        rec.frames.push_back(frame_name(t, 4));
        const StepResult r = cursor.step();
        rec.actions.push_back(cursor.last_action());
        rec.rewards.push_back(r.reward);
        rec.crashes.push_back(r.crashed);
    }
    rec.id = rec.compute_id();
    return rec;
}

// Files ---------------------------------------------------------------------------

struct WrittenFile {
    std::string path;
    std::string sha256;
};

inline WrittenFile write_artifact(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::filesystem::create_directories(path.parent_path());
    write_file(path.string(), bytes);
    return {path.string(), sha256_hex(bytes)};
}

inline WrittenFile write_text_artifact(const std::filesystem::path& path, const std::string& text) {
    return write_artifact(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Writes <dir>/deck.json and one PNG per entry at the entry's frame path.
inline std::vector<WrittenFile> write_deck(const CriticalStateDeck& deck, const std::filesystem::path& dir) {
    std::vector<WrittenFile> files;
    for (const auto& e : deck.entries)
        if (!e.scene.is_null()) files.push_back(write_artifact(dir / e.frame, render_png(e.scene)));
    files.push_back(write_text_artifact(dir / "deck.json", nlohmann::json(deck).dump(2) + "\n"));
    return files;
}

inline CriticalStateDeck load_deck(const std::filesystem::path& path) {
    const auto p = std::filesystem::is_directory(path) ? path / "deck.json" : path;
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot read deck " + p.string());
    CriticalStateDeck d = nlohmann::json::parse(in).get<CriticalStateDeck>();
    validate_deck(d);
    return d;
}

/// Writes <dir>/recording.json and the PNG frame directory.
inline std::vector<WrittenFile> write_recording(const RolloutRecording& rec, const std::filesystem::path& dir) {
    std::vector<WrittenFile> files;
    for (std::size_t i = 0; i < rec.frames.size(); ++i)
        files.push_back(write_artifact(dir / rec.frames[i], render_png(rec.scenes[i])));
    files.push_back(write_text_artifact(dir / "recording.json", nlohmann::json(rec).dump() + "\n"));
    return files;
}

// Pong condition fixtures ---------------------------------------------------------

/// The five exposure conditions on the Pong query states, built from the
/// scripted tracker: the correct deck holds the two critical states; the
/// others remove one, add a mildly or clearly non-critical state, or flip a
/// displayed action.
inline std::map<std::string, CriticalStateDeck> pong_condition_decks() {
    const PongTrackerPolicy policy;
    const auto states = query_states("pong");
    auto find = [&](const std::string& label) -> const LabeledState& {
        for (const auto& s : states)
            if (s.label == label) return s;
        throw std::logic_error("missing pong query state " + label);
    };
    double cutoff = 0.0;
    for (const auto& s : states)
        if (!s.critical) cutoff = std::max(cutoff, score_state(policy, s.observation(), CriticalityMethod::value_based).value);
    auto entry = [&](const std::string& label) {
        DeckEntry e = make_entry(policy, *find(label).env, CriticalityMethod::value_based, cutoff);
        e.label = label;
        return e;
    };

    CriticalStateDeck correct;
    correct.kind = "fixture";
    correct.method = to_string(CriticalityMethod::value_based);
    correct.score_method = correct.method;
    correct.policy_hash = policy.id();
    correct.env_name = "pong";
    correct.env_config = PongConfig{};
    correct.action_values = find("s5").env->action_values();
    correct.cutoff = cutoff;
    correct.entries = {entry("s5"), entry("s6")};
    std::stable_sort(correct.entries.begin(), correct.entries.end(),
                     [](const DeckEntry& a, const DeckEntry& b) { return a.score > b.score; });
    correct.provenance = {{"condition", "correct"}};
    correct.seal();

    auto index_of = [&](const std::string& label) {
        for (std::size_t i = 0; i < correct.entries.size(); ++i)
            if (correct.entries[i].label == label) return i;
        throw std::logic_error("label not in deck");
    };
    auto labelled = [](CriticalStateDeck d, const std::string& condition) {
        d.provenance["condition"] = condition;
        d.seal();
        return d;
    };

    std::map<std::string, CriticalStateDeck> out;
    out["correct"] = correct;
    out["false_negative"] = labelled(edit_deck(correct, {{index_of("s6")}, {}, {}, "drop the second critical state"}),
                                     "false_negative");
    out["weak_false_positive"] =
        labelled(edit_deck(correct, {{}, {entry("s3")}, {}, "add an approaching but distant ball"}), "weak_false_positive");
    out["false_positive"] =
        labelled(edit_deck(correct, {{}, {entry("s1")}, {}, "add a ball moving away"}), "false_positive");
    const auto& s5 = correct.entries[index_of("s5")];
    const std::size_t wrong = s5.displayed_action == 0 ? 2 : 0;
    out["incorrect_action"] =
        labelled(edit_deck(correct, {{}, {}, {{index_of("s5"), wrong}}, "show the opposite move"}), "incorrect_action");
    return out;
}

}  // namespace critstate
