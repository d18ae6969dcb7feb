#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "geomod/error.hpp"

namespace geomod {

// Location specificity, coarse to fine. The numeric rank is the order.
enum class Granularity : int {
    Country = 1,
    City = 2,
    Neighborhood = 3,
    ExactLocationName = 4,
    Coordinates = 5,
};

inline constexpr std::array<Granularity, 5> kAllGranularities = {
    Granularity::Country, Granularity::City, Granularity::Neighborhood,
    Granularity::ExactLocationName, Granularity::Coordinates};

constexpr int rank(Granularity g) noexcept { return static_cast<int>(g); }

constexpr bool operator<(Granularity a, Granularity b) noexcept { return rank(a) < rank(b); }
constexpr bool operator>(Granularity a, Granularity b) noexcept { return b < a; }
constexpr bool operator<=(Granularity a, Granularity b) noexcept { return !(b < a); }
constexpr bool operator>=(Granularity a, Granularity b) noexcept { return !(a < b); }

// True iff `observed` is as specific as `threshold` or more.
constexpr bool granularity_at_least(Granularity observed, Granularity threshold) noexcept {
    return observed >= threshold;
}

constexpr std::string_view to_string(Granularity g) noexcept {
    switch (g) {
        case Granularity::Country: return "country";
        case Granularity::City: return "city";
        case Granularity::Neighborhood: return "neighborhood";
        case Granularity::ExactLocationName: return "exact_location_name";
        case Granularity::Coordinates: return "coordinates";
    }
    return "unknown";
}

inline std::optional<Granularity> parse_granularity(std::string_view name) noexcept {
    for (auto g : kAllGranularities) {
        if (to_string(g) == name) return g;
    }
    return std::nullopt;
}

inline constexpr double kEarthRadiusKm = 6371.0;
// Two coordinates closer than this are the same location.
inline constexpr double kSameLocationKm = 0.05;

class GeoCoordinate {
public:
    // Degrees; north and east positive.
    GeoCoordinate(double latitude, double longitude) : lat_(latitude), lon_(longitude) {
        if (!std::isfinite(latitude) || latitude < -90.0 || latitude > 90.0) {
            throw InvalidCoordinate("latitude out of range [-90, 90]: " + std::to_string(latitude));
        }
        if (!std::isfinite(longitude) || longitude < -180.0 || longitude > 180.0) {
            throw InvalidCoordinate("longitude out of range [-180, 180]: " +
                                    std::to_string(longitude));
        }
    }

    double latitude() const noexcept { return lat_; }
    double longitude() const noexcept { return lon_; }

    bool operator==(const GeoCoordinate&) const = default;

private:
    double lat_;
    double lon_;
};

constexpr double deg_to_rad(double deg) noexcept { return deg * (std::numbers::pi / 180.0); }
constexpr double rad_to_deg(double rad) noexcept { return rad * (180.0 / std::numbers::pi); }

// Great-circle distance in kilometres on a sphere of radius kEarthRadiusKm.
inline double haversine_distance(const GeoCoordinate& a, const GeoCoordinate& b) noexcept {
    const double lat1 = deg_to_rad(a.latitude());
    const double lat2 = deg_to_rad(b.latitude());
    const double sin_dlat = std::sin((lat2 - lat1) / 2.0);
    const double sin_dlon = std::sin(deg_to_rad(b.longitude() - a.longitude()) / 2.0);
    double h = sin_dlat * sin_dlat + std::cos(lat1) * std::cos(lat2) * sin_dlon * sin_dlon;
    h = std::min(1.0, std::max(0.0, h));
    return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

// Longitudes -180 and 180 compare equal here because the distance vanishes.
inline bool same_location(const GeoCoordinate& a, const GeoCoordinate& b) noexcept {
    return haversine_distance(a, b) <= kSameLocationKm;
}

struct CandidatePoint {
    CandidatePoint(GeoCoordinate p, double w) : point(p), weight(w) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw InvalidCoordinate("candidate weight must be finite and non-negative");
        }
    }

    GeoCoordinate point;
    double weight;
};

inline constexpr double kDegenerateCentroidNorm = 1e-9;

// Weighted centroid of points on the unit sphere: average the weighted unit
// vectors, then read latitude/longitude off the (interior) mean vector.
inline GeoCoordinate weighted_centroid(std::span<const CandidatePoint> points) {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double total_weight = 0.0;
    for (const auto& c : points) total_weight += c.weight;
    if (points.empty() || !(total_weight > 0.0)) throw EmptyCandidateSet();

    // Coincident candidates: skip the trig round trip so the answer is exact.
    const auto same = [&](const CandidatePoint& c) { return c.point == points.front().point; };
    if (std::all_of(points.begin(), points.end(), same)) return points.front().point;

    for (const auto& c : points) {
        const double lat = deg_to_rad(c.point.latitude());
        const double lon = deg_to_rad(c.point.longitude());
        x += c.weight * std::cos(lat) * std::cos(lon);
        y += c.weight * std::cos(lat) * std::sin(lon);
        z += c.weight * std::sin(lat);
    }
    x /= total_weight;
    y /= total_weight;
    z /= total_weight;

    if (std::sqrt(x * x + y * y + z * z) < kDegenerateCentroidNorm) throw DegenerateCentroid();

    const double lon = std::atan2(y, x);
    const double hypotenuse = std::sqrt(x * x + y * y);
    const double lat = std::atan2(z, hypotenuse);
    // atan2 lands in [-pi, pi]; rounding in the degree conversion can overshoot by an ulp.
    return GeoCoordinate(std::clamp(rad_to_deg(lat), -90.0, 90.0),
                         std::clamp(rad_to_deg(lon), -180.0, 180.0));
}

}  // namespace geomod
