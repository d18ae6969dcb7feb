#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geomod/dialogue.hpp"

namespace geomod {

// One flag per message; positive class = flagged / should be flagged.
using FlagVector = std::vector<bool>;
// Per conversation, one flag per turn.
using FlagTable = std::vector<FlagVector>;

struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t tn = 0;

    std::size_t total() const noexcept { return tp + fp + fn + tn; }
    bool operator==(const ConfusionCounts&) const = default;
};

// 2tp / (2tp + fp + fn), with 0/0 taken as 0.
inline double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) noexcept {
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

struct F1Result {
    ConfusionCounts counts;
    double f1 = 0.0;
    // Neither gold nor predicted positives; f1 is 0 by convention.
    bool no_positives = false;
};

inline F1Result message_f1(const FlagVector& predicted, const FlagVector& gold) {
    if (predicted.size() != gold.size()) {
        throw LengthMismatch("decisions (" + std::to_string(predicted.size()) + ") and gold labels (" +
                             std::to_string(gold.size()) + ") differ in length");
    }
    F1Result r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (predicted[i] && gold[i]) ++r.counts.tp;
        else if (predicted[i]) ++r.counts.fp;
        else if (gold[i]) ++r.counts.fn;
        else ++r.counts.tn;
    }
    r.f1 = f1_from_counts(r.counts.tp, r.counts.fp, r.counts.fn);
    r.no_positives = (r.counts.tp + r.counts.fp + r.counts.fn) == 0;
    return r;
}

inline constexpr std::size_t kDefaultBootstrapResamples = 1000;

// Standard deviation (n-1 denominator) of F1 over `resamples` message-level
// resamples drawn with replacement.
inline double bootstrap_se(const FlagVector& predicted, const FlagVector& gold, std::size_t resamples,
                           std::uint64_t seed) {
    if (predicted.size() != gold.size()) throw LengthMismatch("decisions and gold labels differ in length");
    if (resamples < 1) throw DataError("bootstrap needs at least one resample");
    const std::size_t n = gold.size();
    if (n == 0 || resamples == 1) return 0.0;

    // 0 = tp, 1 = fp, 2 = fn, 3 = tn
    std::vector<std::uint8_t> cell(n);
    for (std::size_t i = 0; i < n; ++i) {
        cell[i] = predicted[i] ? (gold[i] ? 0 : 1) : (gold[i] ? 2 : 3);
    }
    std::mt19937_64 engine(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    // Welford: identical resample scores give exactly zero spread.
    double mean = 0.0;
    double m2 = 0.0;
    for (std::size_t b = 0; b < resamples; ++b) {
        std::size_t counts[4] = {0, 0, 0, 0};
        for (std::size_t i = 0; i < n; ++i) ++counts[cell[pick(engine)]];
        const double f = f1_from_counts(counts[0], counts[1], counts[2]);
        const double delta = f - mean;
        mean += delta / static_cast<double>(b + 1);
        m2 += delta * (f - mean);
    }
    const double var = std::max(0.0, m2 / static_cast<double>(resamples - 1));
    return std::sqrt(var);
}

struct Proportion {
    std::size_t count = 0;
    std::size_t denominator = 0;

    std::optional<double> value() const {
        if (denominator == 0) return std::nullopt;
        return static_cast<double>(count) / static_cast<double>(denominator);
    }
};

inline void check_flags(const Conversation& c, const FlagVector& flags) {
    if (flags.size() != c.turns.size()) {
        throw LengthMismatch("conversation '" + c.id + "' has " + std::to_string(c.turns.size()) +
                             " turns but " + std::to_string(flags.size()) + " decisions");
    }
}

// What survives moderation: the newly revealed fields of every unflagged
// turn, overlaid in turn order. Flagged turns are removed.
inline LocationAnnotation moderated_reveal(const Conversation& c, const FlagVector& flags) {
    check_flags(c, flags);
    const auto deltas = turn_deltas(c.turns, c.id);
    LocationAnnotation out;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        if (!flags[i]) out = merge_annotation(std::move(out), deltas[i]);
    }
    return out;
}

// Everything the unmoderated dialogue revealed.
inline LocationAnnotation full_reveal(const Conversation& c) {
    LocationAnnotation out;
    for (const auto& d : turn_deltas(c.turns, c.id)) out = merge_annotation(std::move(out), d);
    return out;
}

inline void check_table(std::span<const Conversation> conversations, const FlagTable& flags) {
    if (flags.size() != conversations.size()) {
        throw LengthMismatch("decision table covers " + std::to_string(flags.size()) +
                             " conversations, corpus has " + std::to_string(conversations.size()));
    }
}

// Share of conversations whose moderated form still reveals something at
// granularity `g` or finer.
inline Proportion leaked_proportion(std::span<const Conversation> conversations, const FlagTable& flags,
                                    Granularity g) {
    check_table(conversations, flags);
    Proportion p;
    p.denominator = conversations.size();
    for (std::size_t i = 0; i < conversations.size(); ++i) {
        if (moderated_reveal(conversations[i], flags[i]).any_at_least(g)) ++p.count;
    }
    return p;
}

// Among conversations that revealed something coarser than `g`, the share
// whose moderated form reveals nothing coarser than `g`.
inline Proportion wrongly_withheld_proportion(std::span<const Conversation> conversations,
                                              const FlagTable& flags, Granularity g) {
    if (g == Granularity::Country) throw UndefinedAtCountry();
    check_table(conversations, flags);
    Proportion p;
    for (std::size_t i = 0; i < conversations.size(); ++i) {
        if (!full_reveal(conversations[i]).any_below(g)) continue;
        ++p.denominator;
        if (!moderated_reveal(conversations[i], flags[i]).any_below(g)) ++p.count;
    }
    return p;
}

struct CdfPoint {
    double km = 0.0;
    double fraction = 0.0;

    bool operator==(const CdfPoint&) const = default;
};

// Fraction of errors <= each threshold; infinite errors fall in no bucket.
inline std::vector<CdfPoint> error_cdf(std::span<const double> errors_km, std::span<const double> thresholds) {
    std::vector<CdfPoint> out;
    out.reserve(thresholds.size());
    for (double t : thresholds) {
        std::size_t hits = 0;
        for (double e : errors_km) {
            if (std::isfinite(e) && e <= t) ++hits;
        }
        out.push_back({t, errors_km.empty() ? 0.0
                                            : static_cast<double>(hits) / static_cast<double>(errors_km.size())});
    }
    return out;
}

}  // namespace geomod
