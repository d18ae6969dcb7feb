#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "geomod/error.hpp"
#include "geomod/geo.hpp"
#include "geomod/text.hpp"

namespace geomod {

using Json = nlohmann::ordered_json;

// Location information, one slot per granularity. Text slots are "present"
// when they contain anything other than whitespace. Finer slots may be filled
// while coarser ones stay blank.
struct LocationAnnotation {
    std::string country;
    std::string city;
    std::string neighborhood;
    std::string exact_location_name;
    std::optional<GeoCoordinate> coordinate;
    // Keys found on input that are not part of the schema.
    Json extra = Json::object();

    bool has(Granularity g) const {
        if (g == Granularity::Coordinates) return coordinate.has_value();
        return !is_blank(text(g));
    }

    const std::string& text(Granularity g) const {
        switch (g) {
            case Granularity::Country: return country;
            case Granularity::City: return city;
            case Granularity::Neighborhood: return neighborhood;
            case Granularity::ExactLocationName: return exact_location_name;
            case Granularity::Coordinates: break;
        }
        throw std::invalid_argument("coordinates have no text slot");
    }

    std::string& text(Granularity g) {
        return const_cast<std::string&>(std::as_const(*this).text(g));
    }

    // Finest granularity present, if any.
    std::optional<Granularity> revealed_level() const {
        for (auto it = kAllGranularities.rbegin(); it != kAllGranularities.rend(); ++it) {
            if (has(*it)) return *it;
        }
        return std::nullopt;
    }

    bool any_at_least(Granularity g) const {
        for (auto level : kAllGranularities) {
            if (level >= g && has(level)) return true;
        }
        return false;
    }

    bool any_below(Granularity g) const {
        for (auto level : kAllGranularities) {
            if (level < g && has(level)) return true;
        }
        return false;
    }

    bool empty() const { return !revealed_level().has_value(); }

    bool operator==(const LocationAnnotation&) const = default;
};

inline bool same_field(const LocationAnnotation& a, const LocationAnnotation& b, Granularity g) {
    if (a.has(g) != b.has(g)) return false;
    if (!a.has(g)) return true;
    if (g == Granularity::Coordinates) return same_location(*a.coordinate, *b.coordinate);
    return normalize_text(a.text(g)) == normalize_text(b.text(g));
}

// Equal up to text normalization and coordinate tolerance; extras ignored.
inline bool equivalent(const LocationAnnotation& a, const LocationAnnotation& b) {
    for (auto g : kAllGranularities) {
        if (!same_field(a, b, g)) return false;
    }
    return true;
}

// Fields of `curr` that are present and differ from `prev`. A changed value
// (a correction) counts as newly revealed.
inline LocationAnnotation annotation_delta(const LocationAnnotation& prev,
                                           const LocationAnnotation& curr) {
    LocationAnnotation delta;
    for (auto g : kAllGranularities) {
        if (!curr.has(g)) continue;
        if (prev.has(g) && same_field(prev, curr, g)) continue;
        if (g == Granularity::Coordinates) {
            delta.coordinate = curr.coordinate;
        } else {
            delta.text(g) = curr.text(g);
        }
    }
    return delta;
}

// Overlay the present fields of `update` onto `base`.
inline LocationAnnotation merge_annotation(LocationAnnotation base, const LocationAnnotation& update) {
    for (auto g : kAllGranularities) {
        if (!update.has(g)) continue;
        if (g == Granularity::Coordinates) {
            base.coordinate = update.coordinate;
        } else {
            base.text(g) = update.text(g);
        }
    }
    return base;
}

struct Turn {
    int index = 0;  // 1-based
    std::string question;
    std::string response;
    // Everything revealed so far in the conversation; absent when unannotated.
    std::optional<LocationAnnotation> annotation;
    Json extra = Json::object();

    bool operator==(const Turn&) const = default;
};

struct Conversation {
    std::string id;
    std::string image_ref;
    LocationAnnotation ground_truth;
    std::vector<Turn> turns;
    Json extra = Json::object();

    bool operator==(const Conversation&) const = default;
};

inline const LocationAnnotation& require_annotation(const Turn& turn, std::string_view conversation_id) {
    if (!turn.annotation) {
        throw MissingAnnotation("conversation '" + std::string(conversation_id) + "' turn " +
                                std::to_string(turn.index) + " has no location annotation");
    }
    return *turn.annotation;
}

// Newly revealed fields of every turn; turn 1 is compared against the empty annotation.
inline std::vector<LocationAnnotation> turn_deltas(std::span<const Turn> turns,
                                                   std::string_view conversation_id = {}) {
    std::vector<LocationAnnotation> out;
    out.reserve(turns.size());
    LocationAnnotation prev;
    for (const auto& turn : turns) {
        const auto& curr = require_annotation(turn, conversation_id);
        out.push_back(annotation_delta(prev, curr));
        prev = curr;
    }
    return out;
}

// Per-turn, per-granularity gold moderation labels.
class GoldLabelSet {
public:
    GoldLabelSet() = default;
    explicit GoldLabelSet(std::vector<std::array<bool, 5>> flags) : flags_(std::move(flags)) {}

    std::size_t size() const noexcept { return flags_.size(); }

    // `turn` is a 0-based position in the conversation.
    bool at(std::size_t turn, Granularity g) const { return flags_.at(turn)[rank(g) - 1]; }

    std::vector<bool> column(Granularity g) const {
        std::vector<bool> out;
        out.reserve(flags_.size());
        for (const auto& row : flags_) out.push_back(row[rank(g) - 1]);
        return out;
    }

private:
    std::vector<std::array<bool, 5>> flags_;
};

inline std::array<bool, 5> gold_row(const LocationAnnotation& delta) {
    std::array<bool, 5> row{};
    for (auto g : kAllGranularities) row[rank(g) - 1] = delta.any_at_least(g);
    return row;
}

inline GoldLabelSet derive_gold_labels(const Conversation& conversation) {
    std::vector<std::array<bool, 5>> flags;
    for (const auto& delta : turn_deltas(conversation.turns, conversation.id)) {
        flags.push_back(gold_row(delta));
    }
    return GoldLabelSet(std::move(flags));
}

}  // namespace geomod
