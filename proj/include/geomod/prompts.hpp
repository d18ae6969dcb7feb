#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>

#include "geomod/error.hpp"
#include "geomod/geo.hpp"
#include "geomod/prompts_embedded.hpp"

namespace geomod {

// Every prompt the library sends. Defaults are the files under prompts/,
// embedded at build time; a directory with the same layout overrides them.
struct PromptSet {
    std::string moderator;
    // Indexed by rank(granularity) - 1.
    std::array<std::string, 5> moderator_examples;
    std::string ltm_probe;
    std::string belief_update;
    std::string ground_truth;
    std::string extractor;

    const std::string& moderator_example(Granularity g) const {
        return moderator_examples[static_cast<std::size_t>(rank(g) - 1)];
    }

    static PromptSet defaults() {
        PromptSet p;
        p.moderator = embedded::kModerator;
        p.moderator_examples = {std::string(embedded::kModeratorExampleCountry),
                                std::string(embedded::kModeratorExampleCity),
                                std::string(embedded::kModeratorExampleNeighborhood),
                                std::string(embedded::kModeratorExampleExactLocationName),
                                std::string(embedded::kModeratorExampleCoordinates)};
        p.ltm_probe = embedded::kLtmProbe;
        p.belief_update = embedded::kBeliefUpdate;
        p.ground_truth = embedded::kGroundTruth;
        p.extractor = embedded::kExtractor;
        return p;
    }

    // Files missing from `dir` keep their default.
    static PromptSet load(const std::filesystem::path& dir) {
        if (!std::filesystem::is_directory(dir)) {
            throw InvalidConfig("prompt directory does not exist: " + dir.string());
        }
        PromptSet p = defaults();
        auto read = [&](const std::filesystem::path& rel, std::string& slot) {
            const auto path = dir / rel;
            if (!std::filesystem::exists(path)) return;
            std::ifstream in(path, std::ios::binary);
            std::ostringstream buf;
            buf << in.rdbuf();
            std::string text = buf.str();
            if (!text.empty() && text.back() == '\n') text.pop_back();
            slot = std::move(text);
        };
        read("moderator.txt", p.moderator);
        for (auto g : kAllGranularities) {
            read(std::filesystem::path("moderator_examples") / (std::string(to_string(g)) + ".txt"),
                 p.moderator_examples[static_cast<std::size_t>(rank(g) - 1)]);
        }
        read("ltm_probe.txt", p.ltm_probe);
        read("belief_update.txt", p.belief_update);
        read("ground_truth.txt", p.ground_truth);
        read("extractor.txt", p.extractor);
        return p;
    }
};

// Substitutes each "{name}" placeholder; unknown braces are left as they are.
inline std::string render_template(
    std::string_view tmpl, std::initializer_list<std::pair<std::string_view, std::string_view>> values) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        bool replaced = false;
        if (tmpl[i] == '{') {
            for (const auto& [name, value] : values) {
                if (tmpl.substr(i + 1, name.size()) == name && i + 1 + name.size() < tmpl.size() &&
                    tmpl[i + 1 + name.size()] == '}') {
                    out.append(value);
                    i += name.size() + 2;
                    replaced = true;
                    break;
                }
            }
        }
        if (!replaced) out.push_back(tmpl[i++]);
    }
    return out;
}

// How a granularity is named inside prompts.
constexpr std::string_view granularity_phrase(Granularity g) noexcept {
    switch (g) {
        case Granularity::Country: return "country";
        case Granularity::City: return "city";
        case Granularity::Neighborhood: return "neighborhood";
        case Granularity::ExactLocationName: return "exact location name";
        case Granularity::Coordinates: return "exact GPS coordinates";
    }
    return "unknown";
}

}  // namespace geomod
