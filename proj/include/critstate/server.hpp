#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "critstate/exposure.hpp"
#include "critstate/render.hpp"
#include "critstate/soft_q.hpp"
#include "critstate/takeover.hpp"

// After Eigen: <resolv.h> defines a `_res` macro that Eigen uses as a name.
#include <httplib.h>

namespace critstate {

inline constexpr const char* kStreamSchema = "critstate.stream/1";

inline nlohmann::json envelope(const std::string& type, std::size_t step, nlohmann::json payload) {
    return {{"type", type}, {"step", step}, {"payload", std::move(payload)}};
}

inline nlohmann::json error_envelope(std::size_t step, const std::string& code, const std::string& message) {
    return envelope("error", step, {{"code", code}, {"message", message}});
}

/// Parses a command envelope payload. Unknown fields are ignored.
inline Command command_from_json(const nlohmann::json& payload) {
    const std::string kind = payload.value("command", std::string("none"));
    if (kind == "none") return Command::none();
    if (kind == "release") return Command::release();
    if (kind == "take_control") {
        if (!payload.contains("action") || !payload["action"].is_number_integer() || payload["action"].get<long long>() < 0)
            throw std::invalid_argument("take_control needs a non-negative integer action");
        return Command::take_control(payload["action"].get<std::size_t>());
    }
    throw std::invalid_argument("unknown command: " + kind);
}

struct DecisionRecord {
    std::string client_id;
    std::string deck_id;
    std::string decision;  // deploy | decline
    std::string reason;
    std::string timestamp;
};

inline void to_json(nlohmann::json& j, const DecisionRecord& d) {
    j = {{"client_id", d.client_id}, {"deck_id", d.deck_id}, {"decision", d.decision},
         {"reason", d.reason},       {"timestamp", d.timestamp}};
}

struct ServiceOptions {
    std::filesystem::path assets;                  // scanned for deck.json and *.ckpt
    std::optional<std::filesystem::path> log_dir;  // per-session event logs, decisions
    std::size_t step_timeout_ms = 0;               // echoed to clients
    double calibration_percentile = 90.0;
    std::size_t calibration_steps = 1000;
    std::size_t frame_history = 64;
};

/// Deck catalogue, decision store, and live sessions behind one HTTP server.
class TakeoverService {
public:
    explicit TakeoverService(ServiceOptions opt = {}) : opt_(std::move(opt)), sessions_(opt_.log_dir) {
        register_policy({std::make_shared<PongTrackerPolicy>(), "pong", nlohmann::json::object()});
        if (!opt_.assets.empty()) load_assets(opt_.assets);
        routes();
    }

    ~TakeoverService() { stop(); }

    TakeoverService(const TakeoverService&) = delete;
    TakeoverService& operator=(const TakeoverService&) = delete;

    void load_assets(const std::filesystem::path& root) {
        if (!std::filesystem::exists(root)) throw std::runtime_error("assets directory not found: " + root.string());
        for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
            if (!e.is_regular_file()) continue;
            if (e.path().filename() == "deck.json") add_deck(load_deck(e.path()));
            else if (e.path().extension() == ".ckpt") add_checkpoint(PolicyCheckpoint::load(e.path().string()));
        }
    }

    void add_deck(CriticalStateDeck deck) {
        if (deck.id.empty()) deck.seal();
        validate_deck(deck);
        std::lock_guard lock(mutex_);
        decks_[deck.id] = std::move(deck);
    }

    void add_checkpoint(PolicyCheckpoint ckpt) {
        const std::string env = ckpt.env_name;
        const nlohmann::json cfg = ckpt.env_config;
        register_policy({policy_from_checkpoint(std::move(ckpt)), env, cfg});
    }

    void register_policy(RegisteredPolicy p) { sessions_.register_policy(std::move(p)); }

    SessionManager& sessions() noexcept { return sessions_; }

    /// Binds (port 0 picks an ephemeral one) and serves on a background thread.
    int start(const std::string& host = "127.0.0.1", int port = 0) {
        port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    /// Binds and serves on the calling thread.
    int bind(const std::string& host, int port) {
        port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
        return port_;
    }
    bool listen() { return server_.listen_after_bind(); }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const noexcept { return port_; }

private:
    struct Frames {
        std::deque<std::pair<std::size_t, nlohmann::json>> scenes;
    };

    static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void fail(httplib::Response& res, int status, const std::string& code, const std::string& message) {
        reply(res, status, {{"error", {{"code", code}, {"message", message}}}});
    }

    static std::optional<nlohmann::json> parse_body(const httplib::Request& req, httplib::Response& res) {
        if (req.body.empty()) return nlohmann::json::object();
        auto j = nlohmann::json::parse(req.body, nullptr, false);
        if (j.is_discarded()) {
            fail(res, 400, "bad_json", "request body is not valid JSON");
            return std::nullopt;
        }
        return j;
    }

    std::optional<CriticalStateDeck> find_deck(const std::string& id) const {
        std::lock_guard lock(mutex_);
        const auto it = decks_.find(id);
        if (it == decks_.end()) return std::nullopt;
        return it->second;
    }

    static nlohmann::json deck_summary(const CriticalStateDeck& d) {
        return {{"id", d.id},          {"kind", d.kind},     {"method", d.method},
                {"env", d.env_name},   {"policy_hash", d.policy_hash}, {"entries", d.entries.size()},
                {"schema", d.schema},  {"condition", d.provenance.value("condition", nlohmann::json())}};
    }

    nlohmann::json frame_payload(const Session& s) {
        const auto& a = s.annotation();
        return {{"schema", kStreamSchema},
                {"frame", "/sessions/" + s.id() + "/frames/" + std::to_string(s.step_index()) + ".png"},
                {"score", a.score},
                {"in_c_pi", a.in_c_pi},
                {"in_oracle", a.in_oracle},
                {"control", to_string(s.control())},
                {"observation", s.observation()}};
    }

    void remember_frame(const Session& s) {
        std::lock_guard lock(mutex_);
        auto& f = frames_[s.id()];
        f.scenes.emplace_back(s.step_index(), s.scene());
        while (f.scenes.size() > opt_.frame_history) f.scenes.pop_front();
    }

    std::optional<nlohmann::json> recall_frame(const std::string& id, std::size_t step) const {
        std::lock_guard lock(mutex_);
        const auto it = frames_.find(id);
        if (it == frames_.end()) return std::nullopt;
        for (const auto& [n, scene] : it->second.scenes)
            if (n == step) return std::optional<nlohmann::json>(std::in_place, scene);
        return std::nullopt;
    }

    void append_decision(const DecisionRecord& d) {
        if (!opt_.log_dir) return;
        std::ofstream out(*opt_.log_dir / "decisions.jsonl", std::ios::app);
        out << nlohmann::json(d).dump() << '\n';
    }

    void routes() {
        server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"status", "ok"}, {"schema", kStreamSchema}});
        });

        server_.Get("/policies", [this](const httplib::Request&, httplib::Response& res) {
            nlohmann::json out = nlohmann::json::array();
            for (const auto& p : sessions_.policies())
                out.push_back({{"policy_hash", p.policy->id()}, {"env", p.env_name}, {"actions", p.policy->num_actions()}});
            reply(res, 200, {{"policies", out}});
        });

        server_.Get("/decks", [this](const httplib::Request&, httplib::Response& res) {
            nlohmann::json out = nlohmann::json::array();
            std::lock_guard lock(mutex_);
            for (const auto& [id, d] : decks_) out.push_back(deck_summary(d));
            reply(res, 200, {{"decks", out}});
        });

        server_.Get(R"(/decks/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto d = find_deck(req.matches[1]);
            if (!d) return fail(res, 404, "unknown_deck", "no deck " + std::string(req.matches[1]));
            reply(res, 200, *d);
        });

        server_.Get(R"(/decks/([0-9a-f]+)/frames/(\d+)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto d = find_deck(req.matches[1]);
            if (!d) return fail(res, 404, "unknown_deck", "no deck " + std::string(req.matches[1]));
            const std::size_t i = std::stoul(req.matches[2]);
            if (i >= d->entries.size() || d->entries[i].scene.is_null())
                return fail(res, 404, "unknown_frame", "no frame " + std::to_string(i));
            const auto png = render_png(d->entries[i].scene);
            res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
        });

        server_.Post(R"(/decks/([0-9a-f]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
            const std::string deck_id = req.matches[1];
            if (!find_deck(deck_id)) return fail(res, 404, "unknown_deck", "no deck " + deck_id);
            const auto body = parse_body(req, res);
            if (!body) return;
            DecisionRecord d;
            d.deck_id = deck_id;
            d.client_id = body->value("client_id", std::string());
            d.decision = body->value("decision", std::string());
            d.reason = body->value("reason", std::string());
            d.timestamp = body->value("timestamp", std::string());
            if (d.client_id.empty()) return fail(res, 400, "bad_request", "client_id is required");
            if (d.decision != "deploy" && d.decision != "decline")
                return fail(res, 400, "bad_request", "decision must be deploy or decline");
            std::unique_lock lock(mutex_);
            const auto key = std::make_pair(d.client_id, deck_id);
            if (const auto it = decisions_.find(key); it != decisions_.end()) {
                const DecisionRecord stored = it->second;
                lock.unlock();
                if (stored.decision != d.decision)
                    return reply(res, 409, {{"error", {{"code", "decision_conflict"}, {"message", "a different decision is already recorded"}}},
                                            {"decision", stored}});
                return reply(res, 200, {{"accepted", true}, {"duplicate", true}, {"decision", stored}});
            }
            decisions_[key] = d;
            lock.unlock();
            append_decision(d);
            reply(res, 201, {{"accepted", true}, {"duplicate", false}, {"decision", d}});
        });

        server_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req, res);
            if (!body) return;
            try {
                create_session(*body, res);
            } catch (const std::out_of_range& e) {
                fail(res, 404, "unknown_policy", e.what());
            } catch (const std::exception& e) {
                fail(res, 400, "bad_request", e.what());
            }
        });

        server_.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.find(req.matches[1]);
            if (!s) return fail(res, 404, "unknown_session", "no session " + std::string(req.matches[1]));
            std::lock_guard lock(s->mutex());
            reply(res, 200, {{"session_id", s->id()},
                             {"step", s->step_index()},
                             {"control", to_string(s->control())},
                             {"mode", to_string(s->config().mode)},
                             {"closed", s->closed()}});
        });

        server_.Post(R"(/sessions/([^/]+)/stream)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.find(req.matches[1]);
            if (!s) return fail(res, 404, "unknown_session", "no session " + std::string(req.matches[1]));
            const auto body = parse_body(req, res);
            if (!body) return;
            nlohmann::json commands = body->is_array() ? *body : body->value("envelopes", nlohmann::json::array({*body}));
            nlohmann::json out = nlohmann::json::array();
            std::lock_guard lock(s->mutex());
            for (const auto& env : commands) {
                if (!env.is_object() || env.value("type", std::string()) != "command") {
                    out.push_back(error_envelope(s->step_index(), "bad_envelope", "expected a command envelope"));
                    break;
                }
                if (env.contains("step") && env["step"].is_number_integer() && env["step"].get<std::size_t>() != s->step_index()) {
                    out.push_back(error_envelope(s->step_index(), "stale_step", "command addressed to step " + env["step"].dump()));
                    break;
                }
                try {
                    const nlohmann::json payload = env.value("payload", nlohmann::json::object());
                    Command cmd = command_from_json(payload);
                    const std::size_t repeat = payload.value("repeat", std::size_t{1});
                    for (std::size_t r = 0; r < repeat; ++r) {
                        const StepOutcome o = s->step(r == 0 ? cmd : Command::none());
                        remember_frame(*s);
                        nlohmann::json p = frame_payload(*s);
                        p["last"] = {{"step", o.step},
                                     {"control", to_string(o.control)},
                                     {"applied_action", o.applied_action},
                                     {"policy_action", o.policy_action},
                                     {"score", o.annotation.score},
                                     {"in_c_pi", o.annotation.in_c_pi},
                                     {"in_oracle", o.annotation.in_oracle},
                                     {"reward", o.reward},
                                     {"crashed", o.crashed},
                                     {"episode_reset", o.episode_reset},
                                     {"case", o.intervention_case ? nlohmann::json(*o.intervention_case) : nlohmann::json(nullptr)}};
                        out.push_back(envelope("frame", s->step_index(), std::move(p)));
                    }
                } catch (const std::logic_error& e) {
                    out.push_back(error_envelope(s->step_index(), s->closed() ? "session_closed" : "bad_command", e.what()));
                    break;
                }
            }
            reply(res, 200, {{"schema", kStreamSchema}, {"envelopes", out}});
        });

        server_.Get(R"(/sessions/([^/]+)/frame\.png)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.find(req.matches[1]);
            if (!s) return fail(res, 404, "unknown_session", "no session " + std::string(req.matches[1]));
            nlohmann::json scene;
            {
                std::lock_guard lock(s->mutex());
                scene = s->scene();
            }
            const auto png = render_png(scene);
            res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
        });

        server_.Get(R"(/sessions/([^/]+)/frames/(\d+)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto scene = recall_frame(req.matches[1], std::stoul(req.matches[2]));
            if (!scene) return fail(res, 404, "unknown_frame", "frame no longer held");
            const auto png = render_png(*scene);
            res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
        });

        server_.Post(R"(/sessions/([^/]+)/end)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.find(req.matches[1]);
            if (!s) return fail(res, 404, "unknown_session", "no session " + std::string(req.matches[1]));
            std::lock_guard lock(s->mutex());
            s->end();
            reply(res, 200, {{"session_id", s->id()}, {"closed", true}, {"step", s->step_index()}});
        });

        server_.Get(R"(/sessions/([^/]+)/report)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.find(req.matches[1]);
            if (!s) return fail(res, 404, "unknown_session", "no session " + std::string(req.matches[1]));
            std::lock_guard lock(s->mutex());
            if (!s->closed()) return fail(res, 409, "session_live", "end the session before requesting a report");
            reply(res, 200, s->report());
        });

        server_.Get(R"(/sessions/([^/]+)/log)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.find(req.matches[1]);
            if (!s) return fail(res, 404, "unknown_session", "no session " + std::string(req.matches[1]));
            std::string text;
            {
                std::lock_guard lock(s->mutex());
                for (const auto& e : s->events()) text += e.dump() + "\n";
            }
            res.set_content(text, "application/x-ndjson");
        });
    }

    void create_session(const nlohmann::json& body, httplib::Response& res) {
        const std::string policy_id = body.value("policy_hash", body.value("policy", std::string()));
        const auto policy = sessions_.find_policy(policy_id);
        if (!policy) throw std::out_of_range("unknown policy " + policy_id);

        SessionConfig cfg;
        cfg.env_name = body.value("env", policy->env_name);
        if (cfg.env_name != policy->env_name)
            throw std::invalid_argument("policy " + policy_id + " was trained on " + policy->env_name);
        cfg.env_config = policy->env_config;
        cfg.mode = session_mode_from_string(body.value("mode", std::string("supervise")));
        cfg.seed = body.value("seed", std::uint64_t{0});
        cfg.step_timeout_ms = body.value("step_timeout_ms", opt_.step_timeout_ms);

        if (body.contains("deck_id") && body["deck_id"].is_string()) {
            const auto d = find_deck(body["deck_id"].get<std::string>());
            if (!d) throw std::out_of_range("unknown deck " + body["deck_id"].get<std::string>());
            cfg.deck_id = d->id;
            cfg.method = criticality_method_from_string(d->score_method);
            cfg.cutoff = d->cutoff;
        } else {
            cfg.method = criticality_method_from_string(body.value("method", std::string("value_based")));
            if (body.contains("cutoff") && body["cutoff"].is_number())
                cfg.cutoff = body["cutoff"].get<double>();
            else
                cfg.cutoff = calibrate_cutoff(*policy, cfg.method, opt_.calibration_percentile, opt_.calibration_steps,
                                              derive_seed(cfg.seed, 11));
        }

        std::optional<OracleCriticalSet> oracle;
        const nlohmann::json o = body.value("oracle", nlohmann::json::object());
        if (o.value("kind", std::string("scripted")) == "policy") {
            const std::string ref_id = o.value("policy_hash", std::string());
            const auto ref = sessions_.find_policy(ref_id);
            if (!ref) throw std::out_of_range("unknown oracle policy " + ref_id);
            const auto method = criticality_method_from_string(o.value("method", std::string("value_based")));
            const double cut = o.contains("threshold")
                                   ? o["threshold"].get<double>()
                                   : calibrate_cutoff(*ref, method, o.value("percentile", 90.0), opt_.calibration_steps,
                                                      derive_seed(cfg.seed, 13));
            oracle = OracleCriticalSet::from_policy(ref->policy, method, cut);
        }

        const SessionPtr s = sessions_.start(policy_id, cfg, oracle);
        std::lock_guard lock(s->mutex());
        remember_frame(*s);
        reply(res, 201, {{"session_id", s->id()},
                         {"step", s->step_index()},
                         {"mode", to_string(cfg.mode)},
                         {"control", to_string(s->control())},
                         {"method", to_string(cfg.method)},
                         {"cutoff", cfg.cutoff},
                         {"actions", s->num_actions()},
                         {"step_timeout_ms", cfg.step_timeout_ms},
                         {"frame", envelope("frame", s->step_index(), frame_payload(*s))}});
    }

    ServiceOptions opt_;
    SessionManager sessions_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
    mutable std::mutex mutex_;
    std::map<std::string, CriticalStateDeck> decks_;
    std::map<std::pair<std::string, std::string>, DecisionRecord> decisions_;
    std::map<std::string, Frames> frames_;
};

}  // namespace critstate
