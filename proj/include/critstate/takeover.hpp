#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "critstate/criticality.hpp"
#include "critstate/env.hpp"
#include "critstate/envs/registry.hpp"
#include "critstate/policy.hpp"
#include "critstate/rollout.hpp"
#include "critstate/selection.hpp"

namespace critstate {

/// Case (1): the state is not critical to the human; the takeover was
/// unnecessary. Case (2): critical to both. Case (3): critical to the human
/// but missing from the policy's own set.
inline int classify_intervention(bool in_c_pi, bool in_oracle) {
    if (!in_oracle) return 1;
    return in_c_pi ? 2 : 3;
}

enum class ControlHolder { policy, human };
enum class SessionMode { observe, supervise };

inline std::string to_string(ControlHolder h) { return h == ControlHolder::human ? "human" : "policy"; }
inline std::string to_string(SessionMode m) { return m == SessionMode::observe ? "observe" : "supervise"; }

inline SessionMode session_mode_from_string(const std::string& s) {
    if (s == "observe") return SessionMode::observe;
    if (s == "supervise") return SessionMode::supervise;
    throw std::invalid_argument("unknown session mode: " + s);
}

/// Executable stand-in for the human's critical set: either the
/// environment's scripted rule or a reference policy's score above a cutoff.
class OracleCriticalSet {
public:
    static OracleCriticalSet scripted(std::string env_name) {
        OracleCriticalSet o;
        o.kind_ = "scripted";
        o.id_ = "scripted:" + env_name;
        return o;
    }

    static OracleCriticalSet from_policy(PolicyPtr policy, CriticalityMethod method, double cutoff) {
        if (!policy) throw std::invalid_argument("OracleCriticalSet: null policy");
        OracleCriticalSet o;
        o.kind_ = "policy";
        o.id_ = policy->id();
        o.policy_ = std::move(policy);
        o.method_ = method;
        o.cutoff_ = cutoff;
        return o;
    }

    bool contains(const Environment& state) const {
        if (!policy_) return state.scripted_critical();
        return is_critical(score_state(*policy_, state.observation(), method_).value, cutoff_);
    }

    const std::string& kind() const noexcept { return kind_; }
    const std::string& id() const noexcept { return id_; }

    nlohmann::json describe() const {
        nlohmann::json j = {{"kind", kind_}, {"id", id_}};
        if (policy_) {
            j["method"] = to_string(method_);
            j["threshold"] = cutoff_;
        }
        return j;
    }

private:
    std::string kind_ = "scripted";
    std::string id_;
    PolicyPtr policy_;
    CriticalityMethod method_ = CriticalityMethod::value_based;
    double cutoff_ = 0.0;
};

struct InterventionRecord {
    std::size_t step = 0;
    std::vector<double> state;  // observation at the step
    std::size_t human_action = 0;
    std::size_t policy_action = 0;  // the policy's sample at that step
    double score = 0.0;
    bool in_c_pi = false;
    bool in_oracle = false;
    int intervention_case = 1;

    bool operator==(const InterventionRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const InterventionRecord& r) {
    j = {{"step", r.step},           {"state", r.state},     {"human_action", r.human_action},
         {"policy_action", r.policy_action}, {"score", r.score}, {"in_c_pi", r.in_c_pi},
         {"in_oracle", r.in_oracle}, {"case", r.intervention_case}};
}

inline void from_json(const nlohmann::json& j, InterventionRecord& r) {
    r.step = j.at("step").get<std::size_t>();
    r.state = j.value("state", std::vector<double>{});
    r.human_action = j.at("human_action").get<std::size_t>();
    r.policy_action = j.at("policy_action").get<std::size_t>();
    r.score = j.value("score", 0.0);
    r.in_c_pi = j.at("in_c_pi").get<bool>();
    r.in_oracle = j.at("in_oracle").get<bool>();
    r.intervention_case = j.at("case").get<int>();
}

struct SessionReport {
    std::string session_id;
    std::size_t total_steps = 0;
    std::vector<InterventionRecord> interventions;
    std::array<std::size_t, 3> case_counts{};  // cases 1, 2, 3
    std::size_t oracle_critical_steps = 0;
    std::size_t oracle_noncritical_steps = 0;
    double takeover_rate_critical = 0.0;     // human-controlled share of oracle-critical steps
    double takeover_rate_noncritical = 0.0;  // same over the other steps
    std::size_t crashes_policy_control = 0;
    std::size_t crashes_human_control = 0;

    bool operator==(const SessionReport&) const = default;
};

inline void to_json(nlohmann::json& j, const SessionReport& r) {
    j = {{"schema", "critstate.report/1"},
         {"session_id", r.session_id},
         {"total_steps", r.total_steps},
         {"interventions", r.interventions},
         {"case_counts", {{"1", r.case_counts[0]}, {"2", r.case_counts[1]}, {"3", r.case_counts[2]}}},
         {"oracle_critical_steps", r.oracle_critical_steps},
         {"oracle_noncritical_steps", r.oracle_noncritical_steps},
         {"takeover_rate_critical", r.takeover_rate_critical},
         {"takeover_rate_noncritical", r.takeover_rate_noncritical},
         {"crashes_policy_control", r.crashes_policy_control},
         {"crashes_human_control", r.crashes_human_control}};
}

inline void from_json(const nlohmann::json& j, SessionReport& r) {
    r.session_id = j.value("session_id", std::string());
    r.total_steps = j.at("total_steps").get<std::size_t>();
    r.interventions = j.at("interventions").get<std::vector<InterventionRecord>>();
    const auto& c = j.at("case_counts");
    r.case_counts = {c.at("1").get<std::size_t>(), c.at("2").get<std::size_t>(), c.at("3").get<std::size_t>()};
    r.oracle_critical_steps = j.at("oracle_critical_steps").get<std::size_t>();
    r.oracle_noncritical_steps = j.at("oracle_noncritical_steps").get<std::size_t>();
    r.takeover_rate_critical = j.at("takeover_rate_critical").get<double>();
    r.takeover_rate_noncritical = j.at("takeover_rate_noncritical").get<double>();
    r.crashes_policy_control = j.at("crashes_policy_control").get<std::size_t>();
    r.crashes_human_control = j.at("crashes_human_control").get<std::size_t>();
}

/// Rebuilds the report from the event log alone.
inline SessionReport report_from_log(const std::vector<nlohmann::json>& events) {
    SessionReport r;
    std::size_t human_critical = 0, human_noncritical = 0;
    for (const auto& e : events) {
        const std::string type = e.at("event").get<std::string>();
        if (type == "start") {
            r.session_id = e.at("session_id").get<std::string>();
        } else if (type == "step") {
            ++r.total_steps;
            const bool human = e.at("control").get<std::string>() == "human";
            const bool oracle = e.at("in_oracle").get<bool>();
            (oracle ? r.oracle_critical_steps : r.oracle_noncritical_steps) += 1;
            if (human) (oracle ? human_critical : human_noncritical) += 1;
            if (e.at("crashed").get<bool>()) (human ? r.crashes_human_control : r.crashes_policy_control) += 1;
        } else if (type == "intervention") {
            auto rec = e.at("record").get<InterventionRecord>();
            if (rec.intervention_case != classify_intervention(rec.in_c_pi, rec.in_oracle))
                throw std::runtime_error("event log: intervention case inconsistent with its flags");
            ++r.case_counts[static_cast<std::size_t>(rec.intervention_case - 1)];
            r.interventions.push_back(std::move(rec));
        }
    }
    auto rate = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    r.takeover_rate_critical = rate(human_critical, r.oracle_critical_steps);
    r.takeover_rate_noncritical = rate(human_noncritical, r.oracle_noncritical_steps);
    return r;
}

inline std::vector<nlohmann::json> read_event_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read event log " + path.string());
    std::vector<nlohmann::json> events;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) events.push_back(nlohmann::json::parse(line));
    return events;
}

// Sessions ------------------------------------------------------------------------

struct Command {
    enum class Kind { none, take_control, release };
    Kind kind = Kind::none;
    std::size_t action = 0;

    static Command none() { return {}; }
    static Command take_control(std::size_t a) { return {Kind::take_control, a}; }
    static Command release() { return {Kind::release, 0}; }
};

/// Score and membership flags of the state about to be acted in.
struct Annotation {
    double score = 0.0;
    bool in_c_pi = false;
    bool in_oracle = false;
};

struct StepOutcome {
    std::size_t step = 0;  // index of the state that was acted in
    ControlHolder control = ControlHolder::policy;
    std::size_t applied_action = 0;
    std::size_t policy_action = 0;
    Annotation annotation;
    double reward = 0.0;
    bool crashed = false;
    bool episode_reset = false;
    std::optional<int> intervention_case;
};

struct SessionConfig {
    std::string env_name;
    nlohmann::json env_config = nlohmann::json::object();
    SessionMode mode = SessionMode::supervise;
    std::uint64_t seed = 0;
    CriticalityMethod method = CriticalityMethod::value_based;
    double cutoff = 0.0;  // absolute cutoff for in_C_pi
    std::optional<std::string> deck_id;
    std::size_t step_timeout_ms = 0;  // advisory for clients
};

/// One supervised rollout. Not thread-safe by itself; the manager serializes
/// access through `mutex()`.
class Session {
public:
    Session(std::string id, PolicyPtr policy, EnvPtr env, SessionConfig cfg, OracleCriticalSet oracle,
            std::optional<std::filesystem::path> log_path = std::nullopt)
        : id_(std::move(id)),
          policy_(std::move(policy)),
          env_(std::move(env)),
          cfg_(std::move(cfg)),
          oracle_(std::move(oracle)),
          cursor_(*env_, *policy_, cfg_.seed),
          log_path_(std::move(log_path)) {
        if (env_->spec().n_actions != policy_->num_actions())
            throw std::invalid_argument("Session: policy and environment disagree on the action count");
        log({{"event", "start"},
             {"session_id", id_},
             {"policy_hash", policy_->id()},
             {"env", cfg_.env_name},
             {"env_config", cfg_.env_config},
             {"mode", to_string(cfg_.mode)},
             {"seed", cfg_.seed},
             {"method", to_string(cfg_.method)},
             {"cutoff", cfg_.cutoff},
             {"deck_id", cfg_.deck_id ? nlohmann::json(*cfg_.deck_id) : nlohmann::json(nullptr)},
             {"oracle", oracle_.describe()}});
        annotation_ = annotate();
    }

    const std::string& id() const noexcept { return id_; }
    const SessionConfig& config() const noexcept { return cfg_; }
    const PolicySnapshot& policy() const noexcept { return *policy_; }
    std::size_t step_index() const noexcept { return step_; }
    ControlHolder control() const noexcept { return holder_; }
    bool closed() const noexcept { return closed_; }
    const Annotation& annotation() const noexcept { return annotation_; }
    const std::vector<double>& observation() const noexcept { return cursor_.observation(); }
    nlohmann::json scene() const { return cursor_.env().scene(); }
    std::size_t num_actions() const { return policy_->num_actions(); }
    std::mutex& mutex() const noexcept { return mutex_; }
    const std::vector<nlohmann::json>& events() const noexcept { return events_; }

    /// Applies `cmd`, then advances one step. The policy samples its action
    /// every step, also under human control, so its stream never skips.
    StepOutcome step(const Command& cmd) {
        if (closed_) throw std::logic_error("session " + id_ + " is closed");
        if (cmd.kind == Command::Kind::take_control) {
            if (cfg_.mode == SessionMode::observe) throw std::invalid_argument("take_control is not allowed in observe mode");
            if (cmd.action >= num_actions()) throw std::out_of_range("action outside the action set");
            holder_ = ControlHolder::human;
            human_action_ = cmd.action;
            log({{"event", "command"}, {"step", step_}, {"command", "take_control"}, {"action", cmd.action}});
        } else if (cmd.kind == Command::Kind::release) {
            holder_ = ControlHolder::policy;
            log({{"event", "command"}, {"step", step_}, {"command", "release"}});
        }

        StepOutcome out;
        out.step = step_;
        out.annotation = annotation_;
        out.control = holder_;
        out.policy_action = cursor_.sample(cursor_.distribution());
        out.applied_action = holder_ == ControlHolder::human ? human_action_ : out.policy_action;

        if (holder_ == ControlHolder::human) {
            InterventionRecord rec{step_,
                                   cursor_.observation(),
                                   human_action_,
                                   out.policy_action,
                                   annotation_.score,
                                   annotation_.in_c_pi,
                                   annotation_.in_oracle,
                                   classify_intervention(annotation_.in_c_pi, annotation_.in_oracle)};
            out.intervention_case = rec.intervention_case;
            log({{"event", "intervention"}, {"record", rec}});
        }

        const std::size_t episodes_before = cursor_.episodes();
        const StepResult r = cursor_.apply(out.applied_action);
        out.reward = r.reward;
        out.crashed = r.crashed;
        out.episode_reset = cursor_.episodes() != episodes_before;
        log({{"event", "step"},
             {"step", step_},
             {"control", to_string(holder_)},
             {"applied_action", out.applied_action},
             {"policy_action", out.policy_action},
             {"score", annotation_.score},
             {"in_c_pi", annotation_.in_c_pi},
             {"in_oracle", annotation_.in_oracle},
             {"reward", out.reward},
             {"crashed", out.crashed},
             {"episode_reset", out.episode_reset}});
        ++step_;
        annotation_ = annotate();
        return out;
    }

    void end() {
        if (closed_) return;
        log({{"event", "end"}, {"step", step_}});
        closed_ = true;
    }

    SessionReport report() const {
        if (!closed_) throw std::logic_error("session " + id_ + " is still live");
        return report_from_log(events_);
    }

private:
    Annotation annotate() const {
        Annotation a;
        a.score = score_state(*policy_, cursor_.observation(), cfg_.method).value;
        a.in_c_pi = is_critical(a.score, cfg_.cutoff);
        a.in_oracle = oracle_.contains(cursor_.env());
        return a;
    }

    void log(nlohmann::json event) {
        if (log_path_) {
            std::ofstream out(*log_path_, std::ios::app);
            if (!out) throw std::runtime_error("cannot append to event log " + log_path_->string());
            out << event.dump() << '\n';
        }
        events_.push_back(std::move(event));
    }

    std::string id_;
    PolicyPtr policy_;
    EnvPtr env_;
    SessionConfig cfg_;
    OracleCriticalSet oracle_;
    RolloutCursor cursor_;
    std::optional<std::filesystem::path> log_path_;
    std::vector<nlohmann::json> events_;
    Annotation annotation_;
    std::size_t step_ = 0;
    ControlHolder holder_ = ControlHolder::policy;
    std::size_t human_action_ = 0;
    bool closed_ = false;
    mutable std::mutex mutex_;
};

using SessionPtr = std::shared_ptr<Session>;

/// A policy the service can run, with the environment it was trained on.
struct RegisteredPolicy {
    PolicyPtr policy;
    std::string env_name;
    nlohmann::json env_config = nlohmann::json::object();
};

/// Percentile cutoff over a short on-policy calibration rollout.
inline double calibrate_cutoff(const RegisteredPolicy& p, CriticalityMethod method, double percentile_t,
                               std::size_t steps, std::uint64_t seed) {
    const EnvPtr env = make_env(p.env_name, p.env_config);
    const StateBuffer buf = collect_states(*env, *p.policy, steps, seed, {method, {}, false});
    return resolve_threshold(buf.scores, CriticalityThreshold::percentile(percentile_t));
}

/// Thread-safe registry of policies and live sessions.
class SessionManager {
public:
    explicit SessionManager(std::optional<std::filesystem::path> log_dir = std::nullopt) : log_dir_(std::move(log_dir)) {
        if (log_dir_) std::filesystem::create_directories(*log_dir_);
    }

    void register_policy(RegisteredPolicy p) {
        std::lock_guard lock(mutex_);
        const std::string id = p.policy->id();
        policies_[id] = std::move(p);
    }

    std::optional<RegisteredPolicy> find_policy(const std::string& id) const {
        std::lock_guard lock(mutex_);
        const auto it = policies_.find(id);
        if (it == policies_.end()) return std::nullopt;
        return it->second;
    }

    std::vector<RegisteredPolicy> policies() const {
        std::lock_guard lock(mutex_);
        std::vector<RegisteredPolicy> out;
        for (const auto& [id, p] : policies_) out.push_back(p);
        return out;
    }

    SessionPtr start(const std::string& policy_id, SessionConfig cfg, std::optional<OracleCriticalSet> oracle = std::nullopt) {
        const auto p = find_policy(policy_id);
        if (!p) throw std::out_of_range("unknown policy " + policy_id);
        if (cfg.env_name.empty()) cfg.env_name = p->env_name;
        if (cfg.env_name != p->env_name)
            throw std::invalid_argument("policy " + policy_id + " was trained on " + p->env_name);
        if (cfg.env_config.is_null() || cfg.env_config.empty()) cfg.env_config = p->env_config;
        EnvPtr env = make_env(cfg.env_name, cfg.env_config);
        const std::string id = "s" + std::to_string(++counter_);
        std::optional<std::filesystem::path> log_path;
        if (log_dir_) log_path = *log_dir_ / (id + ".jsonl");
        auto s = std::make_shared<Session>(id, p->policy, std::move(env), cfg,
                                           oracle.value_or(OracleCriticalSet::scripted(cfg.env_name)), log_path);
        std::lock_guard lock(mutex_);
        sessions_[id] = s;
        return s;
    }

    SessionPtr find(const std::string& id) const {
        std::lock_guard lock(mutex_);
        const auto it = sessions_.find(id);
        return it == sessions_.end() ? nullptr : it->second;
    }

    std::vector<std::string> session_ids() const {
        std::lock_guard lock(mutex_);
        std::vector<std::string> ids;
        for (const auto& [id, s] : sessions_) ids.push_back(id);
        return ids;
    }

    std::optional<std::filesystem::path> log_path(const std::string& id) const {
        if (!log_dir_) return std::nullopt;
        return *log_dir_ / (id + ".jsonl");
    }

private:
    std::optional<std::filesystem::path> log_dir_;
    mutable std::mutex mutex_;
    std::map<std::string, RegisteredPolicy> policies_;
    std::map<std::string, SessionPtr> sessions_;
    std::atomic<std::uint64_t> counter_{0};
};

}  // namespace critstate
