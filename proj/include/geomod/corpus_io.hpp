#pragma once

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "geomod/dialogue.hpp"

namespace geomod {

// Canonical line-delimited corpus: one JSON object per conversation,
//   {id, image_ref, ground_truth:{country, city, neighborhood,
//    exact_location_name, latitude, longitude}, turns:[{index, question,
//    response, annotation:{...}}]}
// Absent text fields are "", absent coordinates are "". Unknown keys at any
// level survive a read/write cycle.

namespace corpus_detail {

inline bool is_known(std::string_view key, std::initializer_list<std::string_view> known) {
    for (auto k : known) {
        if (k == key) return true;
    }
    return false;
}

inline std::string string_field(const Json& obj, std::string_view key, std::size_t line) {
    const auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return {};
    if (!it->is_string()) throw MalformedRecord(line, "field '" + std::string(key) + "' must be a string");
    return it->get<std::string>();
}

inline std::string required_string(const Json& obj, std::string_view key, std::size_t line) {
    if (!obj.contains(key)) throw MissingRequiredField(line, std::string(key));
    return string_field(obj, key, line);
}

}  // namespace corpus_detail

// Decimal degrees given as a JSON number or a numeric string; "" and null mean absent.
inline std::optional<double> parse_degrees(const Json& value, std::string_view key, std::size_t line) {
    if (value.is_null()) return std::nullopt;
    if (value.is_number()) return value.get<double>();
    if (!value.is_string()) {
        throw MalformedRecord(line, "field '" + std::string(key) + "' must be a number or string");
    }
    const std::string raw = value.get<std::string>();
    std::string_view text = trim_ascii(raw);
    if (text.empty()) return std::nullopt;
    if (text.front() == '+') text.remove_prefix(1);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw MalformedRecord(line, "field '" + std::string(key) + "' is not a decimal number: " + raw);
    }
    return out;
}

inline Json annotation_to_json(const LocationAnnotation& a) {
    Json j = Json::object();
    j["country"] = a.country;
    j["city"] = a.city;
    j["neighborhood"] = a.neighborhood;
    j["exact_location_name"] = a.exact_location_name;
    if (a.coordinate) {
        j["latitude"] = a.coordinate->latitude();
        j["longitude"] = a.coordinate->longitude();
    } else {
        j["latitude"] = "";
        j["longitude"] = "";
    }
    for (const auto& [k, v] : a.extra.items()) j[k] = v;
    return j;
}

inline LocationAnnotation annotation_from_json(const Json& j, std::size_t line) {
    using namespace corpus_detail;
    if (!j.is_object()) throw MalformedRecord(line, "location annotation must be an object");
    LocationAnnotation a;
    a.country = string_field(j, "country", line);
    a.city = string_field(j, "city", line);
    a.neighborhood = string_field(j, "neighborhood", line);
    a.exact_location_name = string_field(j, "exact_location_name", line);
    const auto lat = j.contains("latitude") ? parse_degrees(j.at("latitude"), "latitude", line)
                                            : std::nullopt;
    const auto lon = j.contains("longitude") ? parse_degrees(j.at("longitude"), "longitude", line)
                                             : std::nullopt;
    if (lat.has_value() != lon.has_value()) {
        throw MalformedRecord(line, "latitude and longitude must be given together");
    }
    if (lat) {
        try {
            a.coordinate = GeoCoordinate(*lat, *lon);
        } catch (const InvalidCoordinate& e) {
            throw MalformedRecord(line, e.what());
        }
    }
    for (const auto& [k, v] : j.items()) {
        if (!is_known(k, {"country", "city", "neighborhood", "exact_location_name", "latitude",
                          "longitude"})) {
            a.extra[k] = v;
        }
    }
    return a;
}

inline Json turn_to_json(const Turn& t) {
    Json j = Json::object();
    j["index"] = t.index;
    j["question"] = t.question;
    j["response"] = t.response;
    if (t.annotation) j["annotation"] = annotation_to_json(*t.annotation);
    for (const auto& [k, v] : t.extra.items()) j[k] = v;
    return j;
}

inline Json conversation_to_json(const Conversation& c) {
    Json j = Json::object();
    j["id"] = c.id;
    j["image_ref"] = c.image_ref;
    j["ground_truth"] = annotation_to_json(c.ground_truth);
    Json turns = Json::array();
    for (const auto& t : c.turns) turns.push_back(turn_to_json(t));
    j["turns"] = std::move(turns);
    for (const auto& [k, v] : c.extra.items()) j[k] = v;
    return j;
}

inline Turn turn_from_json(const Json& j, std::size_t line) {
    using namespace corpus_detail;
    if (!j.is_object()) throw MalformedRecord(line, "turn must be an object");
    Turn t;
    if (!j.contains("index")) throw MissingRequiredField(line, "turns[].index");
    if (!j.at("index").is_number_integer()) throw MalformedRecord(line, "turn index must be an integer");
    t.index = j.at("index").get<int>();
    if (!j.contains("question")) throw MissingRequiredField(line, "turns[].question");
    if (!j.contains("response")) throw MissingRequiredField(line, "turns[].response");
    t.question = string_field(j, "question", line);
    t.response = string_field(j, "response", line);
    if (j.contains("annotation") && !j.at("annotation").is_null()) {
        t.annotation = annotation_from_json(j.at("annotation"), line);
    }
    for (const auto& [k, v] : j.items()) {
        if (!is_known(k, {"index", "question", "response", "annotation"})) t.extra[k] = v;
    }
    return t;
}

inline Conversation conversation_from_json(const Json& j, std::size_t line) {
    using namespace corpus_detail;
    if (!j.is_object()) throw MalformedRecord(line, "record must be a JSON object");
    Conversation c;
    c.id = required_string(j, "id", line);
    c.image_ref = required_string(j, "image_ref", line);
    if (j.contains("ground_truth") && !j.at("ground_truth").is_null()) {
        c.ground_truth = annotation_from_json(j.at("ground_truth"), line);
    }
    if (!j.contains("turns")) throw MissingRequiredField(line, "turns");
    const auto& turns = j.at("turns");
    if (!turns.is_array()) throw MalformedRecord(line, "'turns' must be an array");
    if (turns.empty()) throw MalformedRecord(line, "conversation has no turns");
    for (const auto& tj : turns) {
        Turn t = turn_from_json(tj, line);
        if (t.index != static_cast<int>(c.turns.size()) + 1) {
            throw MalformedRecord(line, "turn indices must be contiguous from 1");
        }
        c.turns.push_back(std::move(t));
    }
    for (const auto& [k, v] : j.items()) {
        if (!is_known(k, {"id", "image_ref", "ground_truth", "turns"})) c.extra[k] = v;
    }
    return c;
}

inline std::string dump_line(const Json& j) {
    return j.dump(-1, ' ', false, Json::error_handler_t::replace);
}

inline std::vector<Conversation> read_corpus(std::istream& in) {
    std::vector<Conversation> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (trim_ascii(text).empty()) continue;
        Json j;
        try {
            j = Json::parse(text);
        } catch (const Json::parse_error& e) {
            throw MalformedRecord(line, std::string("invalid JSON: ") + e.what());
        }
        out.push_back(conversation_from_json(j, line));
    }
    return out;
}

inline std::vector<Conversation> read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path.string());
    return read_corpus(in);
}

inline void write_corpus(std::span<const Conversation> conversations, std::ostream& out) {
    for (const auto& c : conversations) out << dump_line(conversation_to_json(c)) << '\n';
}

inline void write_corpus(std::span<const Conversation> conversations,
                         const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write corpus file: " + path.string());
    write_corpus(conversations, out);
    if (!out.flush()) throw StorageError("failed writing corpus file: " + path.string());
}

struct JsonLine {
    std::size_t line;
    Json value;
};

// Any line-delimited JSON file; blank lines skipped.
inline std::vector<JsonLine> read_json_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path.string());
    std::vector<JsonLine> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (trim_ascii(text).empty()) continue;
        try {
            out.push_back({line, Json::parse(text)});
        } catch (const Json::parse_error& e) {
            throw MalformedRecord(line, std::string("invalid JSON: ") + e.what());
        }
    }
    return out;
}

}  // namespace geomod
