#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <httplib.h>

#include "geomod/corpus_io.hpp"
#include "geomod/moderators.hpp"
#include "geomod/vlm_client.hpp"

namespace geomod {

inline constexpr std::string_view kDefaultRefusal = "I can't share more specific location details for this image.";
inline constexpr std::string_view kModeratorErrorRationale = "moderator-error";

struct SessionConfig {
    Granularity granularity = Granularity::City;
    std::string moderator_id = "regex";
    std::string refusal_message = std::string(kDefaultRefusal);

    bool operator==(const SessionConfig&) const = default;
};

inline Json config_to_json(const SessionConfig& c) {
    return Json{{"granularity", to_string(c.granularity)},
                {"moderator", c.moderator_id},
                {"refusal_message", c.refusal_message}};
}

// Keys absent from `j` keep their value in `base`.
inline SessionConfig config_from_json(const Json& j, SessionConfig base = {}) {
    if (!j.is_object()) throw InvalidConfig("config must be a JSON object");
    if (j.contains("granularity")) {
        if (!j["granularity"].is_string()) throw InvalidConfig("granularity must be a string");
        const auto g = parse_granularity(j["granularity"].get<std::string>());
        if (!g) throw InvalidConfig("unknown granularity: " + j["granularity"].get<std::string>());
        base.granularity = *g;
    }
    if (j.contains("moderator")) {
        if (!j["moderator"].is_string() || is_blank(j["moderator"].get<std::string>())) {
            throw InvalidConfig("moderator must be a non-empty string");
        }
        base.moderator_id = j["moderator"].get<std::string>();
    }
    if (j.contains("refusal_message")) {
        if (!j["refusal_message"].is_string() || is_blank(j["refusal_message"].get<std::string>())) {
            throw InvalidConfig("refusal_message must be a non-empty string");
        }
        base.refusal_message = j["refusal_message"].get<std::string>();
    }
    return base;
}

struct TurnRecord {
    int index = 0;
    std::string question;
    std::string raw_response;
    std::string served_response;
    ModerationDecision decision;
    SessionConfig config;
    std::string received_at;
    std::string served_at;
    std::optional<std::string> moderator_error;
    bool upstream_filtered = false;
    std::optional<LocationAnnotation> annotation;
    // Earlier annotations, oldest first.
    std::vector<LocationAnnotation> annotation_history;

    bool operator==(const TurnRecord&) const = default;
};

struct ConversationState {
    std::string id;
    std::string image_ref;
    std::string created_at;
    SessionConfig config;
    std::vector<SessionConfig> config_history;
    std::vector<TurnRecord> turns;
    std::size_t events = 0;

    bool operator==(const ConversationState&) const = default;
};

// Event log lines. Live changes and replay both go through apply_event, so
// a replayed log rebuilds exactly the state that was served.
inline void apply_event(ConversationState& s, const Json& e) {
    const std::string type = e.at("type").get<std::string>();
    if (type == "created") {
        s.id = e.at("id").get<std::string>();
        s.image_ref = e.at("image_ref").get<std::string>();
        s.created_at = e.at("at").get<std::string>();
        s.config = config_from_json(e.at("config"));
        s.config_history = {s.config};
    } else if (type == "config_changed") {
        s.config = config_from_json(e.at("config"));
        s.config_history.push_back(s.config);
    } else if (type == "turn") {
        TurnRecord t;
        t.index = e.at("index").get<int>();
        if (t.index != static_cast<int>(s.turns.size()) + 1) throw StorageError("turn events out of order");
        t.question = e.at("question").get<std::string>();
        t.raw_response = e.at("raw_response").get<std::string>();
        t.served_response = e.at("served_response").get<std::string>();
        const Json& d = e.at("decision");
        t.decision = {d.at("flag").get<bool>(), d.at("rationale").get<std::string>(),
                      d.at("agent").get<std::string>()};
        t.config = config_from_json(e.at("config"));
        t.received_at = e.at("received_at").get<std::string>();
        t.served_at = e.at("served_at").get<std::string>();
        if (e.contains("moderator_error")) t.moderator_error = e["moderator_error"].get<std::string>();
        t.upstream_filtered = e.value("upstream_filtered", false);
        s.turns.push_back(std::move(t));
    } else if (type == "annotated") {
        const int n = e.at("turn").get<int>();
        if (n < 1 || n > static_cast<int>(s.turns.size())) throw StorageError("annotation for unknown turn");
        auto& t = s.turns[static_cast<std::size_t>(n - 1)];
        if (t.annotation) t.annotation_history.push_back(*t.annotation);
        t.annotation = annotation_from_json(e.at("annotation"), 0);
    } else {
        throw StorageError("unknown event type: " + type);
    }
    ++s.events;
}

// The dialogue as the upstream model and the moderator see it: raw responses.
inline std::vector<Turn> raw_dialogue(const ConversationState& s) {
    std::vector<Turn> out;
    out.reserve(s.turns.size());
    for (const auto& t : s.turns) out.push_back(Turn{t.index, t.question, t.raw_response, t.annotation, {}});
    return out;
}

inline std::string utc_now_iso8601() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

using AgentFactory = std::function<std::shared_ptr<ModerationAgent>(const std::string& moderator_id)>;

struct StoreOptions {
    std::filesystem::path directory;
    std::shared_ptr<ChatClient> upstream;
    AgentFactory agents;
    std::optional<std::string> upstream_model;
    std::function<std::string()> clock = utc_now_iso8601;
    // Server-side conversation ids.
    std::function<std::string()> new_id;
};

inline std::function<std::string()> random_id_source() {
    auto engine = std::make_shared<std::mt19937_64>(std::random_device{}());
    auto mutex = std::make_shared<std::mutex>();
    return [engine, mutex] {
        std::lock_guard lock(*mutex);
        char buf[24];
        std::snprintf(buf, sizeof buf, "c%016llx", static_cast<unsigned long long>((*engine)()));
        return std::string(buf);
    };
}

// Conversation store with one append-only JSONL event log per conversation.
// Turns within a conversation are serialized; readers take immutable
// snapshots without waiting on in-flight turns.
class ConversationStore {
public:
    explicit ConversationStore(StoreOptions options) : opt_(std::move(options)) {
        if (!opt_.new_id) opt_.new_id = random_id_source();
        if (!opt_.clock) opt_.clock = utc_now_iso8601;
        std::error_code ec;
        std::filesystem::create_directories(opt_.directory, ec);
        if (ec) throw StorageError("cannot create storage directory " + opt_.directory.string());
        for (const auto& entry : std::filesystem::directory_iterator(opt_.directory)) {
            if (entry.path().extension() != ".jsonl") continue;
            auto state = replay_log(entry.path());
            auto slot = std::make_shared<Slot>();
            slot->snapshot = std::make_shared<const ConversationState>(std::move(state));
            slots_[slot->snapshot->id] = slot;
        }
    }

    static ConversationState replay_log(const std::filesystem::path& path) {
        ConversationState s;
        try {
            for (const auto& [line, j] : read_json_lines(path)) apply_event(s, j);
        } catch (const Json::exception& e) {
            throw StorageError("corrupt event log " + path.string() + ": " + e.what());
        } catch (const DataError& e) {
            throw StorageError("corrupt event log " + path.string() + ": " + e.what());
        }
        return s;
    }

    std::filesystem::path log_path(const std::string& id) const { return opt_.directory / (id + ".jsonl"); }

    std::string create(const std::string& image_ref, const SessionConfig& config) {
        if (is_blank(image_ref)) throw InvalidConfig("image_ref is required");
        std::unique_lock lock(map_mutex_);
        std::string id;
        do {
            id = opt_.new_id();
        } while (slots_.count(id) != 0 || std::filesystem::exists(log_path(id)));
        auto slot = std::make_shared<Slot>();
        ConversationState s;
        const Json e{{"type", "created"},
                     {"id", id},
                     {"image_ref", image_ref},
                     {"config", config_to_json(config)},
                     {"at", opt_.clock()}};
        append(id, e);
        apply_event(s, e);
        slot->snapshot = std::make_shared<const ConversationState>(std::move(s));
        slots_[id] = slot;
        return id;
    }

    std::shared_ptr<const ConversationState> snapshot(const std::string& id) const {
        auto slot = find(id);
        std::lock_guard lock(slot->snap_mutex);
        return slot->snapshot;
    }

    std::vector<std::shared_ptr<const ConversationState>> list() const {
        std::vector<std::shared_ptr<Slot>> slots;
        {
            std::shared_lock lock(map_mutex_);
            for (const auto& [id, s] : slots_) slots.push_back(s);
        }
        std::vector<std::shared_ptr<const ConversationState>> out;
        for (const auto& s : slots) {
            std::lock_guard lock(s->snap_mutex);
            out.push_back(s->snapshot);
        }
        return out;
    }

    SessionConfig set_config(const std::string& id, const Json& patch) {
        auto slot = find(id);
        std::lock_guard turn_lock(slot->turn_mutex);
        const auto current = current_snapshot(*slot);
        const SessionConfig next = config_from_json(patch, current->config);
        commit(*slot, *current, Json{{"type", "config_changed"}, {"config", config_to_json(next)}, {"at", opt_.clock()}});
        return next;
    }

    // Upstream on the raw history, then moderation of the new response
    // under the config in force when the question arrived.
    TurnRecord post_message(const std::string& id, const std::string& question) {
        if (is_blank(question)) throw DataError("question is empty");
        auto slot = find(id);
        std::lock_guard turn_lock(slot->turn_mutex);
        const auto current = current_snapshot(*slot);
        const std::string received_at = opt_.clock();
        const SessionConfig config = current->config;
        std::vector<Turn> dialogue = raw_dialogue(*current);

        ChatRequest req;
        for (const auto& t : dialogue) {
            req.messages.push_back(ChatMessage{Role::User, t.question, std::nullopt});
            req.messages.push_back(ChatMessage{Role::Assistant, t.response, std::nullopt});
        }
        req.messages.push_back(ChatMessage{Role::User, question, std::nullopt});
        req.messages.front().image_ref = current->image_ref;
        req.model = opt_.upstream_model;
        if (!opt_.upstream) throw UpstreamUnavailable("no upstream model configured");
        ChatResponse up;
        try {
            up = opt_.upstream->complete(req);
        } catch (const TransportError& e) {
            throw UpstreamUnavailable(std::string("upstream model unavailable: ") + e.what());
        } catch (const AuthError& e) {
            throw UpstreamUnavailable(std::string("upstream model rejected credentials: ") + e.what());
        }

        ModerationDecision decision;
        std::optional<std::string> moderator_error;
        const bool filtered = up.finish_reason == FinishReason::Filtered;
        if (filtered) {
            decision = {true, "upstream content filter", "upstream"};
        } else {
            dialogue.push_back(Turn{static_cast<int>(dialogue.size()) + 1, question, up.text, std::nullopt, {}});
            try {
                if (!opt_.agents) throw ModeratorError("no moderator factory configured");
                auto agent = opt_.agents(config.moderator_id);
                if (!agent) throw ModeratorError("unknown moderator: " + config.moderator_id);
                decision = agent->moderate(ModerationInput{config.granularity, current->image_ref, dialogue, id});
            } catch (const std::exception& e) {
                moderator_error = e.what();
                decision = {true, std::string(kModeratorErrorRationale), config.moderator_id};
            }
        }
        Json e = Json::object();
        e["type"] = "turn";
        e["index"] = static_cast<int>(current->turns.size()) + 1;
        e["question"] = question;
        e["raw_response"] = up.text;
        e["served_response"] = decision.flag ? config.refusal_message : up.text;
        e["decision"] = Json{{"flag", decision.flag}, {"rationale", decision.rationale}, {"agent", decision.agent_id}};
        e["config"] = config_to_json(config);
        e["received_at"] = received_at;
        e["served_at"] = opt_.clock();
        if (moderator_error) e["moderator_error"] = *moderator_error;
        if (filtered) e["upstream_filtered"] = true;
        return commit(*slot, *current, e)->turns.back();
    }

    // Stores the cumulative annotation of turn n; the previous one is kept in history.
    TurnRecord annotate(const std::string& id, int n, const Json& annotation) {
        auto slot = find(id);
        std::lock_guard turn_lock(slot->turn_mutex);
        const auto current = current_snapshot(*slot);
        if (n < 1 || n > static_cast<int>(current->turns.size())) {
            throw UnknownTurn("conversation '" + id + "' has no turn " + std::to_string(n));
        }
        if (!annotation.is_object()) throw DataError("annotation must be a JSON object");
        const LocationAnnotation parsed = annotation_from_json(annotation, 0);
        const Json e{{"type", "annotated"}, {"turn", n}, {"annotation", annotation_to_json(parsed)}, {"at", opt_.clock()}};
        return commit(*slot, *current, e)->turns[static_cast<std::size_t>(n - 1)];
    }

    enum class View { Served, Raw };

    // Canonical corpus records. Conversations without turns are skipped.
    std::vector<Conversation> export_corpus(std::optional<Granularity> granularity, View view) const {
        auto states = list();
        std::sort(states.begin(), states.end(), [](const auto& a, const auto& b) {
            return std::tie(a->created_at, a->id) < std::tie(b->created_at, b->id);
        });
        std::vector<Conversation> out;
        for (const auto& s : states) {
            if (s->turns.empty()) continue;
            if (granularity && s->config.granularity != *granularity) continue;
            Conversation c;
            c.id = s->id;
            c.image_ref = s->image_ref;
            c.extra["config"] = config_to_json(s->config);
            c.extra["view"] = view == View::Raw ? "raw" : "served";
            for (const auto& t : s->turns) {
                Turn turn;
                turn.index = t.index;
                turn.question = t.question;
                turn.response = view == View::Raw ? t.raw_response : t.served_response;
                turn.annotation = t.annotation;
                turn.extra["moderated"] = t.decision.flag;
                turn.extra["granularity"] = to_string(t.config.granularity);
                if (view == View::Raw) {
                    turn.extra["served_response"] = t.served_response;
                    turn.extra["decision"] = Json{{"flag", t.decision.flag},
                                                  {"rationale", t.decision.rationale},
                                                  {"agent", t.decision.agent_id}};
                }
                c.turns.push_back(std::move(turn));
            }
            out.push_back(std::move(c));
        }
        return out;
    }

private:
    struct Slot {
        std::mutex turn_mutex;
        mutable std::mutex snap_mutex;
        std::shared_ptr<const ConversationState> snapshot;
    };

    std::shared_ptr<Slot> find(const std::string& id) const {
        std::shared_lock lock(map_mutex_);
        const auto it = slots_.find(id);
        if (it == slots_.end()) throw UnknownConversation("unknown conversation: " + id);
        return it->second;
    }

    static std::shared_ptr<const ConversationState> current_snapshot(const Slot& slot) {
        std::lock_guard lock(slot.snap_mutex);
        return slot.snapshot;
    }

    void append(const std::string& id, const Json& event) const {
        std::ofstream out(log_path(id), std::ios::app | std::ios::binary);
        if (!out) throw StorageError("cannot open event log for " + id);
        out << dump_line(event) << '\n';
        out.flush();
        if (!out) throw StorageError("cannot write event log for " + id);
    }

    // Persist first, then publish the new snapshot. Caller holds turn_mutex.
    std::shared_ptr<const ConversationState> commit(Slot& slot, const ConversationState& current,
                                                    const Json& event) {
        ConversationState next = current;
        apply_event(next, event);
        append(current.id, event);
        auto published = std::make_shared<const ConversationState>(std::move(next));
        std::lock_guard lock(slot.snap_mutex);
        slot.snapshot = published;
        return published;
    }

    StoreOptions opt_;
    mutable std::shared_mutex map_mutex_;
    std::map<std::string, std::shared_ptr<Slot>> slots_;
};

// Client-facing turn: served text only.
inline Json client_turn_json(const TurnRecord& t) {
    Json j = Json::object();
    j["index"] = t.index;
    j["question"] = t.question;
    j["response"] = t.served_response;
    j["moderated"] = t.decision.flag;
    j["config"] = config_to_json(t.config);
    j["received_at"] = t.received_at;
    j["served_at"] = t.served_at;
    j["annotation"] = t.annotation ? annotation_to_json(*t.annotation) : Json(nullptr);
    return j;
}

inline Json client_conversation_json(const ConversationState& s) {
    Json turns = Json::array();
    for (const auto& t : s.turns) turns.push_back(client_turn_json(t));
    Json history = Json::array();
    for (const auto& c : s.config_history) history.push_back(config_to_json(c));
    return Json{{"id", s.id},
                {"image_ref", s.image_ref},
                {"created_at", s.created_at},
                {"config", config_to_json(s.config)},
                {"config_history", history},
                {"turns", turns}};
}

struct GatewayOptions {
    // When set, every request must send "Authorization: Bearer <api_token>".
    std::string api_token;
    // Required for the raw export view; raw export is refused when empty.
    std::string admin_token;
};

inline int http_status_for(const std::exception& e) {
    if (dynamic_cast<const UnknownConversation*>(&e) || dynamic_cast<const UnknownTurn*>(&e)) return 404;
    if (dynamic_cast<const UpstreamUnavailable*>(&e)) return 502;
    if (dynamic_cast<const DataError*>(&e)) return 400;
    if (dynamic_cast<const StorageError*>(&e)) return 500;
    if (dynamic_cast<const ServiceError*>(&e)) return 502;
    return 500;
}

class GatewayServer {
public:
    GatewayServer(ConversationStore& store, GatewayOptions options = {})
        : store_(store), options_(std::move(options)) {
        routes();
    }

    httplib::Server& server() { return server_; }

    int bind_to_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
    bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

private:
    static void send_json(httplib::Response& res, int status, const Json& body) {
        res.status = status;
        res.set_content(body.dump(-1, ' ', false, Json::error_handler_t::replace), "application/json");
    }

    static std::string bearer(const httplib::Request& req) {
        const std::string h = req.get_header_value("Authorization");
        return h.starts_with("Bearer ") ? h.substr(7) : std::string();
    }

    template <class Fn>
    httplib::Server::Handler guarded(Fn fn) {
        return [this, fn](const httplib::Request& req, httplib::Response& res) {
            const std::string token = bearer(req);
            const bool admin = !options_.admin_token.empty() && token == options_.admin_token;
            if (!options_.api_token.empty() && token != options_.api_token && !admin) {
                send_json(res, 401, Json{{"error", "missing or invalid API token"}});
                return;
            }
            try {
                fn(req, res);
            } catch (const Json::exception& e) {
                send_json(res, 400, Json{{"error", std::string("bad request body: ") + e.what()}});
            } catch (const std::exception& e) {
                send_json(res, http_status_for(e), Json{{"error", e.what()}});
            }
        };
    }

    static Json body_json(const httplib::Request& req) {
        if (req.body.empty()) return Json::object();
        Json j = Json::parse(req.body, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw DataError("request body must be a JSON object");
        return j;
    }

    void routes() {
        server_.Post("/v1/conversations", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const Json body = body_json(req);
            const std::string image_ref = body.value("image_ref", "");
            const SessionConfig config = config_from_json(body.value("config", Json::object()));
            const std::string id = store_.create(image_ref, config);
            send_json(res, 201, client_conversation_json(*store_.snapshot(id)));
        }));
        server_.Post(R"(/v1/conversations/([^/]+)/messages)",
                     guarded([this](const httplib::Request& req, httplib::Response& res) {
                         const Json body = body_json(req);
                         if (!body.contains("question") || !body["question"].is_string()) {
                             throw DataError("body needs a string 'question'");
                         }
                         const auto turn = store_.post_message(req.matches[1], body["question"].get<std::string>());
                         send_json(res, 200, client_turn_json(turn));
                     }));
        server_.Get(R"(/v1/conversations/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, client_conversation_json(*store_.snapshot(req.matches[1])));
        }));
        server_.Put(R"(/v1/conversations/([^/]+)/config)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto config = store_.set_config(req.matches[1], body_json(req));
                        send_json(res, 200, config_to_json(config));
                    }));
        server_.Put(R"(/v1/conversations/([^/]+)/turns/(\d+)/annotation)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const int n = std::stoi(req.matches[2]);
                        const auto turn = store_.annotate(req.matches[1], n, body_json(req));
                        send_json(res, 200, client_turn_json(turn));
                    }));
        server_.Get("/v1/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::optional<Granularity> g;
            if (req.has_param("granularity")) {
                g = parse_granularity(req.get_param_value("granularity"));
                if (!g) throw InvalidConfig("unknown granularity: " + req.get_param_value("granularity"));
            }
            const std::string view = req.has_param("view") ? req.get_param_value("view") : "served";
            if (view != "served" && view != "raw") throw InvalidConfig("view must be 'served' or 'raw'");
            if (view == "raw" && (options_.admin_token.empty() || bearer(req) != options_.admin_token)) {
                send_json(res, 403, Json{{"error", "raw export requires the admin token"}});
                return;
            }
            const auto corpus = store_.export_corpus(
                g, view == "raw" ? ConversationStore::View::Raw : ConversationStore::View::Served);
            std::ostringstream out;
            write_corpus(corpus, out);
            res.status = 200;
            res.set_content(out.str(), "application/x-ndjson");
        }));
    }

    ConversationStore& store_;
    GatewayOptions options_;
    httplib::Server server_;
};

}  // namespace geomod
