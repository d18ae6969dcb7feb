#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geomod/corpus_io.hpp"
#include "geomod/json_extract.hpp"
#include "geomod/prompts.hpp"
#include "geomod/vlm_client.hpp"

namespace geomod {

// Hidden metadata handed to the answering model.
struct GroundTruthContext {
    std::string title;
    std::string tags;
    double latitude = 0.0;
    double longitude = 0.0;
    std::string address;
};

// One line of the image metadata file:
//   {id, image_ref, title, tags, latitude, longitude, address,
//    country?, city?, neighborhood?, exact_location_name?}
struct ImageRecord {
    std::string id;
    std::string image_ref;
    GroundTruthContext context;
    LocationAnnotation ground_truth;
    Json extra = Json::object();
};

inline ImageRecord image_record_from_json(const Json& j, std::size_t line) {
    if (!j.is_object()) throw MalformedRecord(line, "image record must be a JSON object");
    using namespace corpus_detail;
    ImageRecord r;
    r.image_ref = required_string(j, "image_ref", line);
    r.id = j.contains("id") ? required_string(j, "id", line) : r.image_ref;
    r.context.title = required_string(j, "title", line);
    if (!j.contains("tags")) throw MissingRequiredField(line, "tags");
    if (j["tags"].is_array()) {
        for (const auto& t : j["tags"]) {
            if (!t.is_string()) throw MalformedRecord(line, "tags must be strings");
            if (!r.context.tags.empty()) r.context.tags += ", ";
            r.context.tags += t.get<std::string>();
        }
    } else {
        r.context.tags = required_string(j, "tags", line);
    }
    r.context.address = required_string(j, "address", line);
    for (const char* k : {"latitude", "longitude"}) {
        if (!j.contains(k)) throw MissingRequiredField(line, k);
    }
    const auto lat = parse_degrees(j["latitude"], "latitude", line);
    const auto lon = parse_degrees(j["longitude"], "longitude", line);
    if (!lat || !lon) throw MalformedRecord(line, "image record needs numeric latitude and longitude");
    try {
        r.ground_truth.coordinate = GeoCoordinate(*lat, *lon);
    } catch (const InvalidCoordinate& e) {
        throw MalformedRecord(line, e.what());
    }
    r.context.latitude = *lat;
    r.context.longitude = *lon;
    r.ground_truth.country = string_field(j, "country", line);
    r.ground_truth.city = string_field(j, "city", line);
    r.ground_truth.neighborhood = string_field(j, "neighborhood", line);
    r.ground_truth.exact_location_name = string_field(j, "exact_location_name", line);
    for (const auto& [k, v] : j.items()) {
        if (!is_known(k, {"id", "image_ref", "title", "tags", "address", "latitude", "longitude", "country", "city",
                          "neighborhood", "exact_location_name"})) {
            r.extra[k] = v;
        }
    }
    return r;
}

inline std::vector<ImageRecord> read_image_metadata(const std::filesystem::path& path) {
    std::vector<ImageRecord> out;
    for (const auto& [line, j] : read_json_lines(path)) out.push_back(image_record_from_json(j, line));
    return out;
}

struct BeliefState {
    LocationAnnotation guess;
    std::string question;
};

// {"guess": {country, city, neighborhood, exact: {exact_location_name,
// latitude, longitude}}, "question": "..."}
inline std::optional<BeliefState> parse_belief(std::string_view text) {
    Json obj;
    try {
        obj = extract_first_json_object(text);
    } catch (const DataError&) {
        return std::nullopt;
    }
    const auto q = obj.find("question");
    const auto g = obj.find("guess");
    if (q == obj.end() || !q->is_string() || g == obj.end() || !g->is_object()) return std::nullopt;
    BeliefState b;
    b.question = q->get<std::string>();
    try {
        auto text_of = [](const Json& o, const char* key) {
            const auto it = o.find(key);
            return it != o.end() && it->is_string() ? it->get<std::string>() : std::string();
        };
        b.guess.country = text_of(*g, "country");
        b.guess.city = text_of(*g, "city");
        b.guess.neighborhood = text_of(*g, "neighborhood");
        const Json exact = g->value("exact", Json::object());
        if (exact.is_object()) {
            b.guess.exact_location_name = text_of(exact, "exact_location_name");
            const auto lat = parse_degrees(exact.value("latitude", Json()), "latitude", 0);
            const auto lon = parse_degrees(exact.value("longitude", Json()), "longitude", 0);
            if (lat && lon) b.guess.coordinate = GeoCoordinate(*lat, *lon);
        }
    } catch (const DataError&) {
        return std::nullopt;
    }
    return b;
}

// What the text-only extractor found in one response.
struct Extraction {
    LocationAnnotation revealed;
    std::optional<std::string> warning;
};

inline Extraction parse_extraction(std::string_view text) {
    Json obj;
    try {
        obj = extract_first_json_object(text);
    } catch (const DataError& e) {
        return {{}, std::string("extractor output unparseable: ") + e.what()};
    }
    Extraction out;
    for (auto g : {Granularity::Country, Granularity::City, Granularity::Neighborhood,
                   Granularity::ExactLocationName}) {
        const auto it = obj.find(std::string(to_string(g)));
        if (it != obj.end() && it->is_string()) out.revealed.text(g) = it->get<std::string>();
    }
    try {
        const auto lat = parse_degrees(obj.value("latitude", Json()), "latitude", 0);
        const auto lon = parse_degrees(obj.value("longitude", Json()), "longitude", 0);
        if (lat && lon) out.revealed.coordinate = GeoCoordinate(*lat, *lon);
    } catch (const DataError& e) {
        out.warning = std::string("extracted coordinate rejected: ") + e.what();
    }
    return out;
}

inline constexpr std::string_view kRefusalMarker = "[response withheld by content filter]";
inline constexpr int kDefaultMaxQuestions = 10;

struct SynthesisClients {
    std::shared_ptr<ChatClient> querier;
    std::shared_ptr<ChatClient> answerer;
    std::shared_ptr<ChatClient> extractor;  // text only
};

struct SynthesisOptions {
    int max_turns = kDefaultMaxQuestions;
    int parse_attempts = 2;
    std::optional<std::string> querier_model;
    std::optional<std::string> answerer_model;
    std::optional<std::string> extractor_model;
};

// Carries the dialogue built before the querier's reply became unreadable.
class SynthesisParseError : public DataError {
public:
    SynthesisParseError(const std::string& what, Conversation partial)
        : DataError(what), partial_(std::move(partial)) {}
    const Conversation& partial() const noexcept { return partial_; }

private:
    Conversation partial_;
};

inline std::string render_transcript(std::span<const Turn> history) {
    if (history.empty()) return "No questions have been asked yet.";
    std::string out;
    for (const auto& t : history) {
        out += "Question " + std::to_string(t.index) + ": " + t.question + "\n";
        out += "Answer " + std::to_string(t.index) + ": " + t.response + "\n";
    }
    out.pop_back();
    return out;
}

inline std::string format_degrees(double v) {
    Json j = v;
    return j.dump();
}

class DialogueSynthesizer {
public:
    DialogueSynthesizer(SynthesisClients clients, PromptSet prompts = PromptSet::defaults(),
                        SynthesisOptions options = {})
        : clients_(std::move(clients)), prompts_(std::move(prompts)), options_(std::move(options)) {}

    // A single user message: instructions, the dialogue so far, the image.
    ChatRequest query_request(const std::string& image_ref, std::span<const Turn> history) const {
        ChatRequest req;
        req.messages.push_back(ChatMessage{
            Role::User, prompts_.belief_update + "\n\nPrevious questions and answers:\n" + render_transcript(history),
            image_ref});
        req.model = options_.querier_model;
        return req;
    }

    std::optional<BeliefState> generate_query(const std::string& image_ref, std::span<const Turn> history) {
        const ChatRequest req = query_request(image_ref, history);
        for (int attempt = 0; attempt < options_.parse_attempts; ++attempt) {
            const ChatResponse resp = clients_.querier->complete(req);
            if (resp.finish_reason == FinishReason::Filtered) continue;
            if (auto b = parse_belief(resp.text)) return b;
        }
        return std::nullopt;
    }

    std::string ground_truth_block(const GroundTruthContext& ctx) const {
        const std::string lat = format_degrees(ctx.latitude);
        const std::string lon = format_degrees(ctx.longitude);
        return render_template(prompts_.ground_truth, {{"title", ctx.title},
                                                       {"tags", ctx.tags},
                                                       {"latitude", lat},
                                                       {"longitude", lon},
                                                       {"address", ctx.address}});
    }

    // History replayed turn by turn; the new question carries the hidden metadata.
    ChatRequest answer_request(const std::string& image_ref, std::span<const Turn> history,
                               const std::string& question, const GroundTruthContext& ctx) const {
        ChatRequest req;
        for (const auto& t : history) {
            req.messages.push_back(ChatMessage{Role::User, t.question, std::nullopt});
            req.messages.push_back(ChatMessage{Role::Assistant, t.response, std::nullopt});
        }
        req.messages.push_back(ChatMessage{Role::User, question + "\n\n" + ground_truth_block(ctx), std::nullopt});
        req.messages.front().image_ref = image_ref;
        req.model = options_.answerer_model;
        return req;
    }

    ChatResponse generate_answer(const std::string& image_ref, std::span<const Turn> history,
                                 const std::string& question, const GroundTruthContext& ctx) {
        return clients_.answerer->complete(answer_request(image_ref, history, question, ctx));
    }

    ChatRequest extract_request(const std::string& response) const {
        ChatRequest req;
        req.messages.push_back(
            ChatMessage{Role::User, render_template(prompts_.extractor, {{"response", response}}), std::nullopt});
        req.model = options_.extractor_model;
        return req;
    }

    Extraction extract_revealed_location(const std::string& response) {
        const ChatRequest req = extract_request(response);
        Extraction last{{}, std::string("extractor returned no usable reply")};
        for (int attempt = 0; attempt < options_.parse_attempts; ++attempt) {
            const ChatResponse resp = clients_.extractor->complete(req);
            if (resp.finish_reason == FinishReason::Filtered) {
                last = {{}, std::string("extractor reply filtered")};
                continue;
            }
            last = parse_extraction(resp.text);
            if (!last.warning || last.warning->starts_with("extracted coordinate")) return last;
        }
        last.revealed = {};
        return last;
    }

    // Stops after a turn whose response reveals coordinates, on an empty
    // question, or at the turn cap. If the first question is empty the
    // conversation has no turns.
    Conversation synthesize(const ImageRecord& image) {
        Conversation conv;
        conv.id = image.id;
        conv.image_ref = image.image_ref;
        conv.ground_truth = image.ground_truth;
        conv.extra = image.extra;
        LocationAnnotation cumulative;
        while (static_cast<int>(conv.turns.size()) < options_.max_turns) {
            auto belief = generate_query(image.image_ref, conv.turns);
            if (!belief) {
                throw SynthesisParseError("querier reply for " + image.id + " unparseable after " +
                                              std::to_string(options_.parse_attempts) + " attempts",
                                          conv);
            }
            if (is_blank(belief->question)) break;
            Turn turn;
            turn.index = static_cast<int>(conv.turns.size()) + 1;
            turn.question = belief->question;
            turn.extra["belief"] = annotation_to_json(belief->guess);
            const ChatResponse answer = generate_answer(image.image_ref, conv.turns, turn.question, image.context);
            bool stop = false;
            if (answer.finish_reason == FinishReason::Filtered) {
                turn.response = std::string(kRefusalMarker);
                turn.extra["refused"] = true;
            } else {
                turn.response = answer.text;
                const Extraction found = extract_revealed_location(answer.text);
                if (found.warning) turn.extra["warning"] = *found.warning;
                cumulative = merge_annotation(std::move(cumulative), found.revealed);
                stop = found.revealed.coordinate.has_value();
            }
            turn.annotation = cumulative;
            turn.annotation->extra = Json::object();
            conv.turns.push_back(std::move(turn));
            if (stop) break;
        }
        return conv;
    }

private:
    SynthesisClients clients_;
    PromptSet prompts_;
    SynthesisOptions options_;
};

}  // namespace geomod
