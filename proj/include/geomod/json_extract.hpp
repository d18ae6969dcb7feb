#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "geomod/dialogue.hpp"

namespace geomod {

namespace json_detail {

// End (one past the closing brace) of the balanced object starting at
// `open`, tracking double-quoted strings. nullopt when it never closes.
inline std::optional<std::size_t> balanced_end(std::string_view text, std::size_t open) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            if (--depth == 0) return i + 1;
        }
    }
    return std::nullopt;
}

// Python-literal style objects ({'answer': 'Yes'}) rewritten with double
// quotes. A single quote closes a string only when followed by a structural
// character, so apostrophes inside values survive.
inline std::string requote_single_quoted(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool in_single = false;
    bool in_double = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_double) {
            out.push_back(c);
            if (c == '\\' && i + 1 < text.size()) {
                out.push_back(text[++i]);
            } else if (c == '"') {
                in_double = false;
            }
            continue;
        }
        if (in_single) {
            if (c == '\\' && i + 1 < text.size()) {
                out.push_back(c);
                out.push_back(text[++i]);
                continue;
            }
            if (c == '\'') {
                std::size_t j = i + 1;
                while (j < text.size() && (text[j] == ' ' || text[j] == '\n' || text[j] == '\t' ||
                                           text[j] == '\r')) {
                    ++j;
                }
                if (j >= text.size() || text[j] == ',' || text[j] == ':' || text[j] == '}' ||
                    text[j] == ']') {
                    out.push_back('"');
                    in_single = false;
                    continue;
                }
            }
            if (c == '"') {
                out += "\\\"";
            } else {
                out.push_back(c);
            }
            continue;
        }
        if (c == '\'') {
            in_single = true;
            out.push_back('"');
        } else {
            if (c == '"') in_double = true;
            out.push_back(c);
        }
    }
    return out;
}

inline std::optional<Json> try_parse_object(std::string_view candidate) {
    auto j = Json::parse(candidate.begin(), candidate.end(), nullptr, false);
    if (!j.is_discarded() && j.is_object()) return j;
    const std::string requoted = requote_single_quoted(candidate);
    j = Json::parse(requoted, nullptr, false);
    if (!j.is_discarded() && j.is_object()) return j;
    return std::nullopt;
}

}  // namespace json_detail

// First balanced JSON object embedded in model output. Code fences and
// surrounding prose are skipped; single-quoted keys and values are accepted.
inline Json extract_first_json_object(std::string_view text) {
    bool any_open = false;
    bool any_balanced = false;
    for (std::size_t open = text.find('{'); open != std::string_view::npos;
         open = text.find('{', open + 1)) {
        any_open = true;
        const auto end = json_detail::balanced_end(text, open);
        if (!end) continue;
        any_balanced = true;
        if (auto parsed = json_detail::try_parse_object(text.substr(open, *end - open))) {
            return *parsed;
        }
    }
    if (!any_open) throw NoJsonFound();
    if (!any_balanced) throw UnbalancedJson();
    throw InvalidJson("text contains braces but no parseable JSON object");
}

}  // namespace geomod
