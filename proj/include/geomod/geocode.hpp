#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <httplib.h>

#include "geomod/corpus_io.hpp"
#include "geomod/metrics.hpp"
#include "geomod/parallel.hpp"
#include "geomod/vlm_client.hpp"

namespace geomod {

// Forward-geocoding request. Coordinates are never part of a query.
struct GeocodeQuery {
    std::string country;
    std::string city;
    std::string address;  // neighborhood goes here
    std::string place_name;

    bool empty() const {
        return is_blank(country) && is_blank(city) && is_blank(address) && is_blank(place_name);
    }

    // Cache / fixture key: normalized fields joined by a unit separator.
    std::string key() const {
        return normalize_text(country) + '\x1f' + normalize_text(city) + '\x1f' + normalize_text(address) +
               '\x1f' + normalize_text(place_name);
    }

    bool operator==(const GeocodeQuery&) const = default;
};

inline Json query_to_json(const GeocodeQuery& q) {
    return Json{{"country", q.country}, {"city", q.city}, {"address", q.address}, {"place_name", q.place_name}};
}

inline GeocodeQuery query_from_json(const Json& j) {
    GeocodeQuery q;
    q.country = j.value("country", "");
    q.city = j.value("city", "");
    q.address = j.value("address", "");
    q.place_name = j.value("place_name", "");
    return q;
}

inline GeocodeQuery assemble_query(const LocationAnnotation& revealed) {
    GeocodeQuery q{revealed.country, revealed.city, revealed.neighborhood, revealed.exact_location_name};
    if (q.empty()) throw EmptyQuery();
    return q;
}

struct GeocodeResult {
    std::vector<CandidatePoint> candidates;
};

inline Json result_to_json(const GeocodeResult& r) {
    Json arr = Json::array();
    for (const auto& c : r.candidates) {
        arr.push_back({{"lat", c.point.latitude()}, {"lon", c.point.longitude()}, {"weight", c.weight}});
    }
    return arr;
}

// Candidates without a confidence get weight 1.
inline GeocodeResult result_from_json(const Json& arr) {
    if (!arr.is_array()) throw DataError("geocode candidates must be an array");
    GeocodeResult r;
    for (const auto& c : arr) {
        if (!c.is_object() || !c.contains("lat") || !c.contains("lon")) {
            throw DataError("geocode candidate needs lat and lon");
        }
        const double w = c.contains("weight") && c["weight"].is_number() ? c["weight"].get<double>() : 1.0;
        r.candidates.emplace_back(GeoCoordinate(c["lat"].get<double>(), c["lon"].get<double>()), w);
    }
    return r;
}

inline constexpr double kInfiniteKm = std::numeric_limits<double>::infinity();

// Infinite distances serialize as the string "inf".
inline Json km_to_json(double km) {
    if (std::isinf(km)) return "inf";
    return km;
}

// Distance from the truth to the confidence-weighted centroid; infinity
// when there is nothing to average.
inline double geocoding_prediction_error(const GeocodeResult& result, const GeoCoordinate& truth) {
    try {
        return haversine_distance(truth, weighted_centroid(result.candidates));
    } catch (const EmptyCandidateSet&) {
        return kInfiniteKm;
    } catch (const DegenerateCentroid&) {
        return kInfiniteKm;
    }
}

// Extra facts a mock may use. Live geocoders ignore it.
struct GeocodeContext {
    std::string conversation_id;
    std::optional<GeoCoordinate> ground_truth;
};

class Geocoder {
public:
    virtual ~Geocoder() = default;
    virtual GeocodeResult geocode(const GeocodeQuery& query, const GeocodeContext& ctx) = 0;
};

// Answers every non-empty query with the ground truth itself.
class IdentityGeocoder final : public Geocoder {
public:
    GeocodeResult geocode(const GeocodeQuery& query, const GeocodeContext& ctx) override {
        GeocodeResult r;
        if (!query.empty() && ctx.ground_truth) r.candidates.emplace_back(*ctx.ground_truth, 1.0);
        return r;
    }
};

// Fixture file: JSON array of {"query": {...}, "candidates": [{lat, lon, weight}]}.
// Entries may carry "error": "unavailable" to simulate an outage. Unknown
// queries return no candidates.
class FixtureGeocoder final : public Geocoder {
public:
    static FixtureGeocoder load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open geocoder fixture: " + path.string());
        Json j = Json::parse(in, nullptr, false);
        if (j.is_discarded()) throw DataError("geocoder fixture is not valid JSON: " + path.string());
        return from_json(j);
    }

    static FixtureGeocoder from_json(const Json& j) {
        if (!j.is_array()) throw DataError("geocoder fixture must be an array");
        FixtureGeocoder g;
        for (const auto& e : j) {
            const auto key = query_from_json(e.value("query", Json::object())).key();
            Entry entry;
            entry.unavailable = e.value("error", "") == "unavailable";
            if (!entry.unavailable) entry.result = result_from_json(e.value("candidates", Json::array()));
            g.entries_[key] = std::move(entry);
        }
        return g;
    }

    GeocodeResult geocode(const GeocodeQuery& query, const GeocodeContext&) override {
        const auto it = entries_.find(query.key());
        if (it == entries_.end()) return {};
        if (it->second.unavailable) throw GeocoderUnavailable("fixture geocoder: simulated outage");
        return it->second.result;
    }

private:
    struct Entry {
        GeocodeResult result;
        bool unavailable = false;
    };
    std::map<std::string, Entry> entries_;
};

struct GeocoderConfig {
    std::string api_base = "https://api.geoapify.com";
    std::string api_key;
    std::chrono::seconds timeout{30};

    // GEOCODER_API_BASE, GEOCODER_API_KEY.
    static GeocoderConfig from_env() {
        GeocoderConfig c;
        if (const char* b = std::getenv("GEOCODER_API_BASE"); b && *b) c.api_base = b;
        if (const char* k = std::getenv("GEOCODER_API_KEY")) c.api_key = k;
        return c;
    }
};

// Parses either the "format=json" shape (results[]) or GeoJSON (features[].properties).
inline GeocodeResult parse_geoapify_response(const std::string& body) {
    const Json j = Json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw GeocoderUnavailable("malformed geocoder response");
    std::vector<Json> items;
    if (j.contains("results") && j["results"].is_array()) {
        for (const auto& r : j["results"]) items.push_back(r);
    } else if (j.contains("features") && j["features"].is_array()) {
        for (const auto& f : j["features"]) items.push_back(f.value("properties", Json::object()));
    }
    GeocodeResult out;
    for (const auto& it : items) {
        if (!it.contains("lat") || !it.contains("lon") || !it["lat"].is_number() || !it["lon"].is_number()) {
            continue;
        }
        double w = 1.0;
        if (it.contains("rank") && it["rank"].is_object() && it["rank"].contains("confidence") &&
            it["rank"]["confidence"].is_number()) {
            w = it["rank"]["confidence"].get<double>();
        }
        try {
            out.candidates.emplace_back(GeoCoordinate(it["lat"].get<double>(), it["lon"].get<double>()),
                                        std::max(0.0, w));
        } catch (const InvalidCoordinate&) {
            continue;
        }
    }
    return out;
}

// Geoapify-compatible structured forward geocoding.
class GeoapifyGeocoder final : public Geocoder {
public:
    explicit GeoapifyGeocoder(GeocoderConfig config, RetryPolicy retry = {})
        : config_(std::move(config)), retry_(std::move(retry)), url_(http_detail::split_url(config_.api_base)) {}

    GeocodeResult geocode(const GeocodeQuery& query, const GeocodeContext&) override {
        httplib::Params params;
        if (!is_blank(query.country)) params.emplace("country", query.country);
        if (!is_blank(query.city)) params.emplace("city", query.city);
        if (!is_blank(query.address)) params.emplace("street", query.address);
        if (!is_blank(query.place_name)) params.emplace("name", query.place_name);
        params.emplace("format", "json");
        params.emplace("apiKey", config_.api_key);
        const std::string path = httplib::append_query_params(url_.path + "/v1/geocode/search", params);
        std::string last_error;
        for (int attempt = 0;; ++attempt) {
            httplib::Client cli(url_.origin);
            cli.set_connection_timeout(config_.timeout);
            cli.set_read_timeout(config_.timeout);
            auto res = cli.Get(path);
            if (res) {
                if (res->status == 200) return parse_geoapify_response(res->body);
                if (res->status == 401 || res->status == 403) {
                    throw AuthError("geocoder rejected credentials (HTTP " + std::to_string(res->status) + ")");
                }
                last_error = "HTTP " + std::to_string(res->status);
                if (!http_detail::is_transient_status(res->status)) {
                    throw GeocoderUnavailable("geocoder returned " + last_error);
                }
            } else {
                last_error = httplib::to_string(res.error());
            }
            if (attempt >= retry_.max_retries) break;
            retry_.sleep(retry_.delay(attempt));
        }
        throw GeocoderUnavailable("geocoder unavailable: " + last_error);
    }

private:
    GeocoderConfig config_;
    RetryPolicy retry_;
    http_detail::SplitUrl url_;
};

// Disk cache in front of another geocoder: one JSON line per query,
// {"key", "query", "candidates"}. Hits never reach the inner geocoder.
class CachingGeocoder final : public Geocoder {
public:
    CachingGeocoder(std::unique_ptr<Geocoder> inner, std::filesystem::path path)
        : inner_(std::move(inner)), path_(std::move(path)) {
        if (std::filesystem::exists(path_)) {
            for (const auto& [line, j] : read_json_lines(path_)) {
                try {
                    cache_[j.at("key").get<std::string>()] = result_from_json(j.at("candidates"));
                } catch (const std::exception& e) {
                    throw MalformedRecord(line, std::string("geocoder cache: ") + e.what());
                }
            }
        }
    }

    GeocodeResult geocode(const GeocodeQuery& query, const GeocodeContext& ctx) override {
        const std::string key = query.key();
        {
            std::lock_guard lock(mutex_);
            if (auto it = cache_.find(key); it != cache_.end()) {
                ++hits_;
                return it->second;
            }
        }
        GeocodeResult r = inner_->geocode(query, ctx);
        std::lock_guard lock(mutex_);
        if (cache_.emplace(key, r).second) {
            std::ofstream out(path_, std::ios::app);
            if (!out) throw StorageError("cannot append to geocoder cache " + path_.string());
            out << dump_line(Json{{"key", key}, {"query", query_to_json(query)}, {"candidates", result_to_json(r)}})
                << '\n';
        }
        return r;
    }

    std::size_t hits() const {
        std::lock_guard lock(mutex_);
        return hits_;
    }

private:
    std::unique_ptr<Geocoder> inner_;
    std::filesystem::path path_;
    mutable std::mutex mutex_;
    std::map<std::string, GeocodeResult> cache_;
    std::size_t hits_ = 0;
};

enum class AttackStatus { Scored, EmptyQuery, NoGroundTruth, Unavailable };

constexpr std::string_view to_string(AttackStatus s) noexcept {
    switch (s) {
        case AttackStatus::Scored: return "scored";
        case AttackStatus::EmptyQuery: return "empty_query";
        case AttackStatus::NoGroundTruth: return "no_ground_truth";
        case AttackStatus::Unavailable: return "unavailable";
    }
    return "unavailable";
}

struct AttackRecord {
    std::string conversation_id;
    AttackStatus status = AttackStatus::Scored;
    std::optional<GeocodeQuery> query;
    std::size_t candidates = 0;
    double error_km = kInfiniteKm;
};

inline const std::vector<double>& default_attack_thresholds() {
    static const std::vector<double> t = {0.0, 1.0, 5.0, 20.0, 25.0, 200.0, 750.0, 2500.0};
    return t;
}

struct AttackReport {
    Granularity granularity = Granularity::City;
    std::vector<AttackRecord> records;
    std::vector<CdfPoint> cdf;
    double within_5km = 0.0;
    double within_20km = 0.0;
    // Conversations the geocoder could not answer. They are left out of the
    // CDF and the report is partial.
    std::size_t unavailable = 0;

    bool partial() const noexcept { return unavailable > 0; }

    // Errors of the conversations that count towards the CDF.
    std::vector<double> scored_errors() const {
        std::vector<double> out;
        for (const auto& r : records) {
            if (r.status != AttackStatus::Unavailable) out.push_back(r.error_km);
        }
        return out;
    }
};

// Per conversation: delta-union over unflagged turns, query, geocode,
// distance. Empty queries and conversations without ground-truth
// coordinates score infinity.
inline AttackReport run_attack(std::span<const Conversation> conversations, const FlagTable& flags,
                               Geocoder& geocoder, Granularity granularity,
                               std::span<const double> thresholds = default_attack_thresholds(),
                               std::size_t jobs = 1) {
    check_table(conversations, flags);
    AttackReport report;
    report.granularity = granularity;
    report.records.resize(conversations.size());
    parallel_for(conversations.size(), jobs, [&](std::size_t i) {
        const Conversation& c = conversations[i];
        AttackRecord& rec = report.records[i];
        rec.conversation_id = c.id;
        const LocationAnnotation revealed = moderated_reveal(c, flags[i]);
        try {
            rec.query = assemble_query(revealed);
        } catch (const EmptyQuery&) {
            rec.status = AttackStatus::EmptyQuery;
            return;
        }
        GeocodeContext ctx{c.id, c.ground_truth.coordinate};
        GeocodeResult result;
        try {
            result = geocoder.geocode(*rec.query, ctx);
        } catch (const GeocoderUnavailable&) {
            rec.status = AttackStatus::Unavailable;
            return;
        }
        rec.candidates = result.candidates.size();
        if (!c.ground_truth.coordinate) {
            rec.status = AttackStatus::NoGroundTruth;
            return;
        }
        rec.error_km = geocoding_prediction_error(result, *c.ground_truth.coordinate);
    });
    for (const auto& r : report.records) {
        if (r.status == AttackStatus::Unavailable) ++report.unavailable;
    }
    const auto errors = report.scored_errors();
    report.cdf = error_cdf(errors, thresholds);
    const double summary[] = {5.0, 20.0};
    const auto fixed = error_cdf(errors, summary);
    report.within_5km = fixed[0].fraction;
    report.within_20km = fixed[1].fraction;
    return report;
}

}  // namespace geomod
