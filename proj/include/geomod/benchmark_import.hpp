#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include "geomod/corpus_io.hpp"

namespace geomod {

// Maps externally published dialogue records onto the canonical schema.
// Field names are matched against a list of aliases; anything unmapped is
// kept verbatim in the matching `extra` object.
namespace import_detail {

inline const Json* first_of(const Json& obj, std::initializer_list<const char*> names, std::string* used = nullptr) {
    for (const char* n : names) {
        const auto it = obj.find(n);
        if (it != obj.end() && !it->is_null()) {
            if (used) *used = n;
            return &*it;
        }
    }
    return nullptr;
}

inline std::string text_value(const Json* v) {
    if (!v) return {};
    if (v->is_string()) return v->get<std::string>();
    if (v->is_number()) return v->dump();
    return {};
}

// "unknown"-style placeholders mean nothing was revealed.
inline std::string clean(std::string s) {
    const std::string n = normalize_text(s);
    if (n == "unknown" || n == "none" || n == "n/a" || n == "null") return {};
    return s;
}

inline LocationAnnotation annotation(const Json& j, std::size_t line) {
    if (!j.is_object()) throw MalformedRecord(line, "location annotation must be an object");
    LocationAnnotation a;
    std::vector<std::string> used;
    auto take = [&](std::initializer_list<const char*> names) {
        std::string key;
        const Json* v = first_of(j, names, &key);
        if (v) used.push_back(key);
        return v;
    };
    a.country = clean(text_value(take({"country"})));
    a.city = clean(text_value(take({"city"})));
    a.neighborhood = clean(text_value(take({"neighborhood", "neighbourhood"})));
    a.exact_location_name = clean(text_value(take({"exact_location_name", "exact_location", "location_name"})));
    const Json* exact = take({"exact"});
    if (exact && exact->is_object() && a.exact_location_name.empty()) {
        a.exact_location_name = clean(text_value(first_of(*exact, {"exact_location_name", "name"})));
    }
    const Json* lat = take({"latitude", "lat"});
    const Json* lon = take({"longitude", "lon", "lng"});
    if ((!lat || !lon) && exact && exact->is_object()) {
        if (!lat) lat = first_of(*exact, {"latitude", "lat"});
        if (!lon) lon = first_of(*exact, {"longitude", "lon", "lng"});
    }
    const auto la = lat ? parse_degrees(*lat, "latitude", line) : std::nullopt;
    const auto lo = lon ? parse_degrees(*lon, "longitude", line) : std::nullopt;
    if (la && lo) {
        try {
            a.coordinate = GeoCoordinate(*la, *lo);
        } catch (const InvalidCoordinate& e) {
            throw MalformedRecord(line, e.what());
        }
    }
    for (const auto& [k, v] : j.items()) {
        if (std::find(used.begin(), used.end(), k) == used.end()) a.extra[k] = v;
    }
    return a;
}

inline const char* const kTurnKeys[] = {"turns", "dialogue", "messages", "conversation"};

inline std::vector<Turn> turns(const Json& arr, std::size_t line) {
    if (!arr.is_array()) throw MalformedRecord(line, "dialogue must be an array");
    std::vector<Turn> out;
    const bool role_style = !arr.empty() && arr[0].is_object() && arr[0].contains("role");
    if (!role_style) {
        for (const auto& tj : arr) {
            if (!tj.is_object()) throw MalformedRecord(line, "turn must be an object");
            Turn t;
            t.index = static_cast<int>(out.size()) + 1;
            t.question = text_value(first_of(tj, {"question", "user", "query", "prompt"}));
            t.response = text_value(first_of(tj, {"response", "answer", "assistant", "reply"}));
            if (const Json* a = first_of(tj, {"annotation", "annotations", "location", "revealed"})) {
                t.annotation = annotation(*a, line);
            }
            for (const auto& [k, v] : tj.items()) {
                if (!corpus_detail::is_known(k, {"index", "question", "user", "query", "prompt", "response", "answer",
                                                 "assistant", "reply", "annotation", "annotations", "location",
                                                 "revealed"})) {
                    t.extra[k] = v;
                }
            }
            out.push_back(std::move(t));
        }
        return out;
    }
    // role/content messages: pair each user message with the next assistant one.
    std::optional<Turn> pending;
    for (const auto& m : arr) {
        if (!m.is_object()) throw MalformedRecord(line, "message must be an object");
        const std::string role = ascii_lower(text_value(first_of(m, {"role"})));
        std::string content = text_value(first_of(m, {"content", "text"}));
        if (const Json* c = first_of(m, {"content"}); c && c->is_array()) {
            content.clear();
            for (const auto& part : *c) {
                if (part.is_object() && part.value("type", "") == "text") content += part.value("text", "");
            }
        }
        if (role == "system") continue;
        if (role == "user") {
            if (pending) out.push_back(std::move(*pending));
            pending = Turn{};
            pending->index = static_cast<int>(out.size()) + 1;
            pending->question = content;
        } else {
            if (!pending) {
                pending = Turn{};
                pending->index = static_cast<int>(out.size()) + 1;
            }
            pending->response = content;
            if (const Json* a = first_of(m, {"annotation", "annotations", "location", "revealed"})) {
                pending->annotation = annotation(*a, line);
            }
            out.push_back(std::move(*pending));
            pending.reset();
        }
    }
    if (pending) out.push_back(std::move(*pending));
    return out;
}

}  // namespace import_detail

inline Conversation import_benchmark_record(const Json& j, std::size_t line, const std::string& fallback_id = {}) {
    using namespace import_detail;
    if (!j.is_object()) throw MalformedRecord(line, "record must be a JSON object");
    Conversation c;
    std::vector<std::string> used;
    auto take = [&](std::initializer_list<const char*> names) {
        std::string key;
        const Json* v = first_of(j, names, &key);
        if (v) used.push_back(key);
        return v;
    };
    c.id = text_value(take({"id", "conversation_id", "image_id", "name"}));
    if (c.id.empty()) c.id = fallback_id;
    if (c.id.empty()) throw MissingRequiredField(line, "id");
    c.image_ref = text_value(take({"image_ref", "image_path", "image", "img_path", "image_file"}));
    if (const Json* gt = take({"ground_truth", "gt", "true_location", "label"})) {
        c.ground_truth = annotation(*gt, line);
    }
    const Json* dialogue = nullptr;
    for (const char* k : kTurnKeys) {
        if (!dialogue) dialogue = take({k});
    }
    if (!dialogue) throw MissingRequiredField(line, "turns");
    c.turns = turns(*dialogue, line);
    if (c.turns.empty()) throw MalformedRecord(line, "conversation has no turns");
    for (const auto& [k, v] : j.items()) {
        if (std::find(used.begin(), used.end(), k) == used.end()) c.extra[k] = v;
    }
    return c;
}

// A .jsonl file, a .json file (object or array), or a directory of them.
inline std::vector<Conversation> import_benchmark(const std::filesystem::path& path) {
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(path)) {
        for (const auto& e : std::filesystem::recursive_directory_iterator(path)) {
            const auto ext = e.path().extension();
            if (e.is_regular_file() && (ext == ".json" || ext == ".jsonl")) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(path);
    }
    std::vector<Conversation> out;
    for (const auto& f : files) {
        if (f.extension() == ".jsonl") {
            for (const auto& [line, j] : read_json_lines(f)) out.push_back(import_benchmark_record(j, line));
            continue;
        }
        std::ifstream in(f);
        if (!in) throw DataError("cannot open " + f.string());
        const Json j = Json::parse(in, nullptr, false);
        if (j.is_discarded()) throw MalformedRecord(1, f.string() + " is not valid JSON");
        if (j.is_array()) {
            std::size_t n = 0;
            for (const auto& r : j) out.push_back(import_benchmark_record(r, ++n));
        } else {
            out.push_back(import_benchmark_record(j, 1, f.stem().string()));
        }
    }
    return out;
}

}  // namespace geomod
