#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "geomod/corpus_io.hpp"
#include "geomod/geocode.hpp"
#include "geomod/json_extract.hpp"
#include "geomod/metrics.hpp"
#include "geomod/prompts.hpp"
#include "geomod/vlm_client.hpp"

namespace geomod {

// One guess per level plus coordinates; only the coordinates are scored.
struct LtmPrediction {
    std::string rationale;
    std::string country;
    std::string city;
    std::string neighborhood;
    std::string exact_location_name;
    GeoCoordinate coordinate;

    bool operator==(const LtmPrediction&) const = default;
};

struct Refusal {
    std::string reason;
    bool operator==(const Refusal&) const = default;
};

using ProbeOutcome = std::variant<LtmPrediction, Refusal>;

// Every key is required. Coordinates may be numbers or numeric strings.
inline std::optional<LtmPrediction> parse_ltm_prediction(std::string_view text) {
    Json obj;
    try {
        obj = extract_first_json_object(text);
    } catch (const DataError&) {
        return std::nullopt;
    }
    auto str = [&](const char* key) -> std::optional<std::string> {
        const auto it = obj.find(key);
        if (it == obj.end() || !it->is_string()) return std::nullopt;
        return it->get<std::string>();
    };
    const auto rationale = str("rationale");
    const auto country = str("country");
    const auto city = str("city");
    const auto neighborhood = str("neighborhood");
    const auto exact = str("exact_location_name");
    if (!rationale || !country || !city || !neighborhood || !exact) return std::nullopt;
    if (!obj.contains("latitude") || !obj.contains("longitude")) return std::nullopt;
    try {
        const auto lat = parse_degrees(obj["latitude"], "latitude", 0);
        const auto lon = parse_degrees(obj["longitude"], "longitude", 0);
        if (!lat || !lon) return std::nullopt;
        return LtmPrediction{*rationale, *country, *city, *neighborhood, *exact, GeoCoordinate(*lat, *lon)};
    } catch (const DataError&) {
        return std::nullopt;
    }
}

class LtmProber {
public:
    LtmProber(std::shared_ptr<ChatClient> client, PromptSet prompts = PromptSet::defaults(),
              std::optional<std::string> model = std::nullopt, int parse_attempts = 2)
        : client_(std::move(client)), prompts_(std::move(prompts)), model_(std::move(model)),
          parse_attempts_(parse_attempts) {}

    ChatRequest build_request(const std::string& image_ref) const {
        ChatRequest req;
        req.messages.push_back(ChatMessage{Role::User, prompts_.ltm_probe, image_ref});
        req.model = model_;
        return req;
    }

    ProbeOutcome probe(const std::string& image_ref) {
        const ChatRequest req = build_request(image_ref);
        for (int attempt = 0; attempt < parse_attempts_; ++attempt) {
            const ChatResponse resp = client_->complete(req);
            if (resp.finish_reason == FinishReason::Filtered) return Refusal{"content-filter"};
            if (auto p = parse_ltm_prediction(resp.text)) return *p;
        }
        throw LtmParseError("geolocation reply for " + image_ref + " unparseable after " +
                            std::to_string(parse_attempts_) + " attempts");
    }

private:
    std::shared_ptr<ChatClient> client_;
    PromptSet prompts_;
    std::optional<std::string> model_;
    int parse_attempts_;
};

inline const std::vector<double>& default_geolocation_thresholds() {
    static const std::vector<double> t = {1.0, 25.0, 200.0, 750.0, 2500.0};
    return t;
}

// Refusals are infinitely far away.
inline double prediction_error_km(const ProbeOutcome& outcome, const GeoCoordinate& truth) {
    if (const auto* p = std::get_if<LtmPrediction>(&outcome)) return haversine_distance(p->coordinate, truth);
    return kInfiniteKm;
}

// Median with infinities sorted last; even counts average the middle pair.
inline std::optional<double> median_km(std::vector<double> errors) {
    if (errors.empty()) return std::nullopt;
    std::sort(errors.begin(), errors.end());
    const std::size_t n = errors.size();
    if (n % 2 == 1) return errors[n / 2];
    const double a = errors[n / 2 - 1];
    const double b = errors[n / 2];
    if (std::isinf(a) || std::isinf(b)) return kInfiniteKm;
    return (a + b) / 2.0;
}

struct GeolocationSummary {
    std::vector<double> errors_km;
    std::vector<CdfPoint> fractions;
    std::optional<double> median;
    std::size_t refusals = 0;
};

inline GeolocationSummary evaluate_geolocation(std::span<const ProbeOutcome> predictions,
                                               std::span<const GeoCoordinate> truths,
                                               std::span<const double> thresholds = default_geolocation_thresholds()) {
    if (predictions.size() != truths.size()) {
        throw LengthMismatch(std::to_string(predictions.size()) + " predictions for " +
                             std::to_string(truths.size()) + " ground truths");
    }
    GeolocationSummary s;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (std::holds_alternative<Refusal>(predictions[i])) ++s.refusals;
        s.errors_km.push_back(prediction_error_km(predictions[i], truths[i]));
    }
    s.fractions = error_cdf(s.errors_km, thresholds);
    s.median = median_km(s.errors_km);
    return s;
}

inline Json probe_outcome_to_json(const ProbeOutcome& o) {
    if (const auto* r = std::get_if<Refusal>(&o)) return Json{{"refusal", r->reason}};
    const auto& p = std::get<LtmPrediction>(o);
    return Json{{"rationale", p.rationale},
                {"country", p.country},
                {"city", p.city},
                {"neighborhood", p.neighborhood},
                {"exact_location_name", p.exact_location_name},
                {"latitude", p.coordinate.latitude()},
                {"longitude", p.coordinate.longitude()}};
}

}  // namespace geomod
