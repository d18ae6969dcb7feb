#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "geomod/corpus_io.hpp"
#include "geomod/metrics.hpp"
#include "geomod/moderators.hpp"
#include "geomod/parallel.hpp"

namespace geomod {

// Every decision an agent made over a corpus, per granularity.
struct EvaluationRun {
    std::string agent_id;
    std::vector<Granularity> granularities;
    // decisions[g][conversation][turn]
    std::map<Granularity, std::vector<std::vector<ModerationDecision>>> decisions;

    FlagTable flags(Granularity g) const {
        const auto it = decisions.find(g);
        if (it == decisions.end()) throw DataError("no decisions recorded at " + std::string(to_string(g)));
        FlagTable out;
        out.reserve(it->second.size());
        for (const auto& conv : it->second) {
            FlagVector f;
            f.reserve(conv.size());
            for (const auto& d : conv) f.push_back(d.flag);
            out.push_back(std::move(f));
        }
        return out;
    }
};

// Moderates every (turn, granularity). Conversations run in parallel;
// results land by index, so output never depends on `jobs`.
inline EvaluationRun run_agent(ModerationAgent& agent, std::span<const Conversation> corpus,
                               std::span<const Granularity> granularities, std::size_t jobs = 1) {
    EvaluationRun run;
    run.agent_id = agent.id();
    run.granularities.assign(granularities.begin(), granularities.end());
    for (auto g : granularities) run.decisions[g].resize(corpus.size());
    parallel_for(corpus.size(), jobs, [&](std::size_t i) {
        const Conversation& c = corpus[i];
        const std::span<const Turn> turns(c.turns);
        for (auto g : granularities) {
            auto& out = run.decisions.at(g)[i];
            out.reserve(turns.size());
            for (std::size_t t = 0; t < turns.size(); ++t) {
                out.push_back(agent.moderate(ModerationInput{g, c.image_ref, turns.first(t + 1), c.id}));
            }
        }
    });
    return run;
}

// One JSON line per decision, in corpus order.
inline void write_decisions(const EvaluationRun& run, std::span<const Conversation> corpus, std::ostream& out) {
    for (auto g : run.granularities) {
        const auto& table = run.decisions.at(g);
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            for (std::size_t t = 0; t < table[i].size(); ++t) {
                const auto& d = table[i][t];
                Json j = Json::object();
                j["conversation_id"] = corpus[i].id;
                j["turn"] = corpus[i].turns[t].index;
                j["granularity"] = to_string(g);
                j["flag"] = d.flag;
                j["rationale"] = d.rationale;
                j["agent"] = d.agent_id;
                out << dump_line(j) << '\n';
            }
        }
    }
}

// Rebuilds a run from a decision file. Every (conversation, turn) of the
// corpus must be covered at each requested granularity.
inline EvaluationRun read_decisions(const std::filesystem::path& path, std::span<const Conversation> corpus,
                                    std::span<const Granularity> granularities) {
    std::map<std::string, std::size_t> conv_pos;
    for (std::size_t i = 0; i < corpus.size(); ++i) conv_pos[corpus[i].id] = i;
    using Slot = std::optional<ModerationDecision>;
    std::map<Granularity, std::vector<std::vector<Slot>>> slots;
    for (auto g : granularities) {
        auto& s = slots[g];
        s.resize(corpus.size());
        for (std::size_t i = 0; i < corpus.size(); ++i) s[i].resize(corpus[i].turns.size());
    }
    EvaluationRun run;
    run.granularities.assign(granularities.begin(), granularities.end());
    for (const auto& [line, j] : read_json_lines(path)) {
        try {
            const auto g = parse_granularity(j.at("granularity").get<std::string>());
            if (!g) throw MalformedRecord(line, "unknown granularity");
            auto sit = slots.find(*g);
            if (sit == slots.end()) continue;
            const auto cit = conv_pos.find(j.at("conversation_id").get<std::string>());
            if (cit == conv_pos.end()) throw MalformedRecord(line, "decision for a conversation not in the corpus");
            const int turn = j.at("turn").get<int>();
            const auto& turns = corpus[cit->second].turns;
            if (turn < 1 || static_cast<std::size_t>(turn) > turns.size()) {
                throw MalformedRecord(line, "decision for a turn not in the conversation");
            }
            ModerationDecision d{j.at("flag").get<bool>(), j.value("rationale", ""), j.value("agent", "")};
            if (run.agent_id.empty()) run.agent_id = d.agent_id;
            sit->second[cit->second][static_cast<std::size_t>(turn - 1)] = std::move(d);
        } catch (const Json::exception& e) {
            throw MalformedRecord(line, e.what());
        }
    }
    for (auto g : granularities) {
        auto& table = run.decisions[g];
        table.resize(corpus.size());
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            for (std::size_t t = 0; t < corpus[i].turns.size(); ++t) {
                const auto& s = slots[g][i][t];
                if (!s) {
                    throw LengthMismatch("decision file lacks conversation '" + corpus[i].id + "' turn " +
                                         std::to_string(t + 1) + " at " + std::string(to_string(g)));
                }
                table[i].push_back(*s);
            }
        }
    }
    return run;
}

struct GranularityMetrics {
    Granularity granularity = Granularity::Country;
    F1Result f1;
    double f1_se = 0.0;
    Proportion leaked;
    // Absent at country level.
    std::optional<Proportion> wrongly_withheld;
};

struct MetricsReport {
    std::string agent_id;
    std::uint64_t seed = 0;
    std::size_t resamples = kDefaultBootstrapResamples;
    std::vector<GranularityMetrics> rows;
};

// Each granularity bootstraps from its own stream derived from the seed.
inline std::uint64_t bootstrap_seed(std::uint64_t seed, Granularity g) {
    return splitmix64(seed ^ static_cast<std::uint64_t>(rank(g)));
}

inline MetricsReport compute_metrics(std::span<const Conversation> corpus, const EvaluationRun& run,
                                     std::uint64_t seed, std::size_t resamples = kDefaultBootstrapResamples) {
    MetricsReport report;
    report.agent_id = run.agent_id;
    report.seed = seed;
    report.resamples = resamples;
    std::vector<GoldLabelSet> gold;
    gold.reserve(corpus.size());
    for (const auto& c : corpus) gold.push_back(derive_gold_labels(c));
    for (auto g : run.granularities) {
        const FlagTable table = run.flags(g);
        check_table(corpus, table);
        FlagVector pred;
        FlagVector truth;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            check_flags(corpus[i], table[i]);
            const auto col = gold[i].column(g);
            pred.insert(pred.end(), table[i].begin(), table[i].end());
            truth.insert(truth.end(), col.begin(), col.end());
        }
        GranularityMetrics row;
        row.granularity = g;
        row.f1 = message_f1(pred, truth);
        row.f1_se = bootstrap_se(pred, truth, resamples, bootstrap_seed(seed, g));
        row.leaked = leaked_proportion(corpus, table, g);
        if (g != Granularity::Country) row.wrongly_withheld = wrongly_withheld_proportion(corpus, table, g);
        report.rows.push_back(row);
    }
    return report;
}

inline Json proportion_value(const Proportion& p) {
    const auto v = p.value();
    return v ? Json(*v) : Json("undefined");
}

inline Json metrics_row_to_json(const MetricsReport& report, const GranularityMetrics& r) {
    Json j = Json::object();
    j["agent"] = report.agent_id;
    j["granularity"] = to_string(r.granularity);
    j["tp"] = r.f1.counts.tp;
    j["fp"] = r.f1.counts.fp;
    j["fn"] = r.f1.counts.fn;
    j["tn"] = r.f1.counts.tn;
    j["f1"] = r.f1.f1;
    j["f1_se"] = r.f1_se;
    j["no_positives"] = r.f1.no_positives;
    j["leaked"] = proportion_value(r.leaked);
    j["leaked_count"] = r.leaked.count;
    j["leaked_denominator"] = r.leaked.denominator;
    if (r.wrongly_withheld) {
        j["wrongly_withheld"] = proportion_value(*r.wrongly_withheld);
        j["wrongly_withheld_count"] = r.wrongly_withheld->count;
        j["wrongly_withheld_denominator"] = r.wrongly_withheld->denominator;
    } else {
        j["wrongly_withheld"] = "undefined";
    }
    j["bootstrap_resamples"] = report.resamples;
    j["seed"] = report.seed;
    return j;
}

inline void write_metrics_jsonl(const MetricsReport& report, std::ostream& out) {
    for (const auto& r : report.rows) out << dump_line(metrics_row_to_json(report, r)) << '\n';
}

inline std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline std::string format_proportion(const std::optional<Proportion>& p) {
    if (!p || !p->value()) return "undefined";
    return fixed4(*p->value()) + " (" + std::to_string(p->count) + "/" + std::to_string(p->denominator) + ")";
}

inline std::string metrics_table(const MetricsReport& report) {
    char line[256];
    std::ostringstream out;
    out << "agent: " << report.agent_id << "  seed: " << report.seed << "  resamples: " << report.resamples
        << "\n";
    std::snprintf(line, sizeof line, "%-20s %6s %6s %6s %6s %-18s %-20s %-20s\n", "granularity", "tp", "fp", "fn",
                  "tn", "f1 +/- se", "leaked", "wrongly_withheld");
    out << line;
    for (const auto& r : report.rows) {
        std::string f1 = fixed4(r.f1.f1) + " +/- " + fixed4(r.f1_se);
        if (r.f1.no_positives) f1 += "*";
        std::snprintf(line, sizeof line, "%-20s %6zu %6zu %6zu %6zu %-18s %-20s %-20s\n",
                      std::string(to_string(r.granularity)).c_str(), r.f1.counts.tp, r.f1.counts.fp,
                      r.f1.counts.fn, r.f1.counts.tn, f1.c_str(), format_proportion(r.leaked).c_str(),
                      format_proportion(r.wrongly_withheld).c_str());
        out << line;
    }
    bool marker = false;
    for (const auto& r : report.rows) marker = marker || r.f1.no_positives;
    if (marker) out << "* no gold or predicted positives; f1 reported as 0\n";
    return out.str();
}

}  // namespace geomod
