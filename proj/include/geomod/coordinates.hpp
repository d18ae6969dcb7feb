#pragma once

#include <charconv>
#include <cstddef>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geomod/dialogue.hpp"
#include "geomod/geo.hpp"

namespace geomod {

struct CoordinateMention {
    GeoCoordinate value;
    // Byte offsets [begin, end) into the original text.
    std::size_t begin;
    std::size_t end;
};

namespace coord_detail {

// "lat, lon" validator, applied to a whole candidate substring.
inline const std::regex& validator() {
    static const std::regex re(
        R"(^[-+]?([1-8]?\d(\.\d+)?|90(\.0+)?),\s*[-+]?(180(\.0+)?|((1[0-7]\d)|([1-9]?\d))(\.\d+)?)$)");
    return re;
}

// Permissive "number, number" scanner used to find candidates in prose.
inline const std::regex& scanner() {
    static const std::regex re(R"([-+]?\d+(?:\.\d+)?\s*,\s*[-+]?\d+(?:\.\d+)?)");
    return re;
}

// "41.38° N", "74.0060 W": a magnitude followed by a hemisphere letter.
inline const std::regex& hemisphere() {
    static const std::regex re(
        "(\\d+(?:\\.\\d+)?)\\s*(?:\xC2\xB0|\xC2\xBA|\xCB\x9A)?\\s*([NSEW])(?![A-Za-z])");
    return re;
}

inline constexpr std::string_view kDegreeSigns[] = {"\xC2\xB0", "\xC2\xBA", "\xCB\x9A"};

// Text with hemisphere notation rewritten as signed decimals and stray degree
// signs removed, plus the source byte range each output byte came from.
struct NormalizedText {
    std::string text;
    std::vector<std::size_t> src_begin;
    std::vector<std::size_t> src_end;

    void push(char c, std::size_t b, std::size_t e) {
        text.push_back(c);
        src_begin.push_back(b);
        src_end.push_back(e);
    }
};

inline void copy_plain(std::string_view src, std::size_t from, std::size_t to, NormalizedText& out) {
    std::size_t i = from;
    while (i < to) {
        bool skipped = false;
        for (auto sign : kDegreeSigns) {
            if (src.substr(i, sign.size()) == sign && i + sign.size() <= to) {
                i += sign.size();
                skipped = true;
                break;
            }
        }
        if (skipped) continue;
        out.push(src[i], i, i + 1);
        ++i;
    }
}

inline NormalizedText normalize_hemispheres(std::string_view src) {
    NormalizedText out;
    std::size_t cursor = 0;
    const std::string owned(src);
    for (auto it = std::sregex_iterator(owned.begin(), owned.end(), hemisphere());
         it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        const auto begin = static_cast<std::size_t>(m.position(0));
        const auto end = begin + static_cast<std::size_t>(m.length(0));
        // A signed magnitude ("-41.3 S") is left alone rather than double-negated.
        if (begin > 0 && (src[begin - 1] == '-' || src[begin - 1] == '+')) continue;
        copy_plain(src, cursor, begin, out);
        const char hemi = m.str(2)[0];
        if (hemi == 'S' || hemi == 'W') out.push('-', begin, end);
        for (char c : m.str(1)) out.push(c, begin, end);
        cursor = end;
    }
    copy_plain(src, cursor, src.size(), out);
    return out;
}

inline double parse_signed(std::string_view s) {
    s = trim_ascii(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
}

inline bool is_word_char(char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '.' ||
           c == '_';
}

}  // namespace coord_detail

// True iff `candidate` in its entirety is a valid "lat, lon" pair.
inline bool is_coordinate_pair(std::string_view candidate) {
    return std::regex_match(candidate.begin(), candidate.end(), coord_detail::validator());
}

// All valid "lat, lon" pairs in `text`, in order of appearance.
inline std::vector<CoordinateMention> extract_coordinates(std::string_view text) {
    using namespace coord_detail;
    const NormalizedText norm = normalize_hemispheres(text);
    std::vector<CoordinateMention> out;
    for (auto it = std::sregex_iterator(norm.text.begin(), norm.text.end(), scanner());
         it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        const auto b = static_cast<std::size_t>(m.position(0));
        const auto e = b + static_cast<std::size_t>(m.length(0));
        if (b > 0 && is_word_char(norm.text[b - 1])) continue;
        const std::string candidate = m.str(0);
        if (!is_coordinate_pair(candidate)) continue;
        const auto comma = candidate.find(',');
        const GeoCoordinate value(parse_signed(std::string_view(candidate).substr(0, comma)),
                                  parse_signed(std::string_view(candidate).substr(comma + 1)));
        out.push_back(CoordinateMention{value, norm.src_begin[b], norm.src_end[e - 1]});
    }
    return out;
}

// Regex moderation baseline: flag a response that states a coordinate not
// already given in an earlier response. Questions are not inspected.
inline bool regex_baseline_flag(std::span<const Turn> conversation_prefix,
                                std::string_view response_under_test) {
    std::vector<GeoCoordinate> seen;
    for (const auto& turn : conversation_prefix) {
        for (const auto& m : extract_coordinates(turn.response)) seen.push_back(m.value);
    }
    for (const auto& m : extract_coordinates(response_under_test)) {
        bool known = false;
        for (const auto& s : seen) {
            if (same_location(s, m.value)) {
                known = true;
                break;
            }
        }
        if (!known) return true;
    }
    return false;
}

}  // namespace geomod
