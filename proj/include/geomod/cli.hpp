#pragma once

#include <atomic>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "geomod/benchmark_import.hpp"
#include "geomod/evaluation.hpp"
#include "geomod/gateway.hpp"
#include "geomod/geocode.hpp"
#include "geomod/ltm.hpp"
#include "geomod/synthesis.hpp"

namespace geomod {

inline constexpr std::string_view kVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitService = 3 };

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ServiceError*>(&e)) return kExitService;
    return kExitData;
}

namespace cli_detail {

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline std::string fingerprint(const std::filesystem::path& p) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(read_file(p))));
    return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + p.string());
    return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) { open_out(p) << text; }

inline void prepare_out_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir.string());
}

// "live" or "mock:<script>".
struct VlmSource {
    std::string spec = "live";
    std::optional<MockScript> script;
    std::shared_ptr<ChatClient> live;

    static VlmSource parse(const std::string& spec) {
        VlmSource s;
        s.spec = spec;
        if (spec.starts_with("mock:")) {
            s.script = MockScript::load(spec.substr(5));
        } else if (spec != "live") {
            throw InvalidConfig("--vlm must be 'live' or 'mock:<script>'");
        }
        return s;
    }

    // Each call to a mock channel yields a fresh client over that channel.
    std::shared_ptr<ChatClient> client(const std::string& channel, bool repeat_last = true) {
        if (script) return std::shared_ptr<ChatClient>(script->client(channel, repeat_last));
        if (!live) live = std::make_shared<OpenAiChatClient>(EndpointConfig::from_env());
        return live;
    }

    std::shared_ptr<ChatClient> client_for(const std::string& channel, const std::string& key, bool repeat_last) {
        if (script && script->has(channel + ":" + key)) return client(channel + ":" + key, repeat_last);
        return client(channel, repeat_last);
    }
};

inline std::vector<Granularity> parse_granularities(const std::vector<std::string>& names,
                                                    std::vector<Granularity> fallback) {
    if (names.empty()) return fallback;
    std::vector<Granularity> out;
    for (const auto& n : names) {
        const auto g = parse_granularity(n);
        if (!g) throw InvalidConfig("unknown granularity: " + n);
        if (std::find(out.begin(), out.end(), *g) == out.end()) out.push_back(*g);
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline Json granularity_list(const std::vector<Granularity>& gs) {
    Json a = Json::array();
    for (auto g : gs) a.push_back(to_string(g));
    return a;
}

inline Json manifest(const std::string& command, Json args, Json inputs) {
    return Json{{"tool", "geomod"}, {"version", kVersion}, {"command", command}, {"args", std::move(args)},
                {"inputs", std::move(inputs)}};
}

inline void write_manifest(const std::filesystem::path& dir, const Json& m) {
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline PromptSet load_prompts(const std::string& dir) {
    return dir.empty() ? PromptSet::defaults() : PromptSet::load(dir);
}

inline std::string format_km(double km) {
    if (std::isinf(km)) return "inf";
    return fixed4(km);
}

inline void write_cdf_csv(const std::filesystem::path& p, const std::vector<CdfPoint>& cdf) {
    auto out = open_out(p);
    out << "km,fraction\n";
    for (const auto& pt : cdf) out << format_km(pt.km) << ',' << fixed4(pt.fraction) << '\n';
}

}  // namespace cli_detail

struct EvaluateOptions {
    std::string corpus;
    std::string agent;
    std::vector<std::string> granularities;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::string out;
    std::string vlm = "live";
    std::string decisions;
    std::string prompts;
    std::size_t resamples = kDefaultBootstrapResamples;
};

// Runs or replays an agent, writes decisions, metrics and a manifest.
inline int cmd_evaluate(const EvaluateOptions& o, std::ostream& log) {
    using namespace cli_detail;
    if (o.agent.empty() == o.decisions.empty()) throw InvalidConfig("give exactly one of --agent or --decisions");
    const auto corpus = read_corpus(std::filesystem::path(o.corpus));
    const auto gs = parse_granularities(o.granularities, {kAllGranularities.begin(), kAllGranularities.end()});
    prepare_out_dir(o.out);
    const std::filesystem::path out(o.out);
    EvaluationRun run;
    Json inputs{{"corpus", o.corpus}, {"corpus_fnv1a64", fingerprint(o.corpus)}};
    if (!o.decisions.empty()) {
        run = read_decisions(o.decisions, corpus, gs);
        inputs["decisions"] = o.decisions;
        inputs["decisions_fnv1a64"] = fingerprint(o.decisions);
    } else {
        auto vlm = VlmSource::parse(o.vlm);
        AgentContext ctx;
        ctx.seed = o.seed;
        ctx.prompts = load_prompts(o.prompts);
        ctx.chat_client = [&](const std::string&) { return vlm.client("moderator"); };
        auto agent = make_agent(o.agent, ctx);
        run = run_agent(*agent, corpus, gs, o.jobs);
        if (vlm.script) inputs["vlm_script_fnv1a64"] = fingerprint(o.vlm.substr(5));
    }
    {
        auto f = open_out(out / "decisions.jsonl");
        write_decisions(run, corpus, f);
    }
    const auto report = compute_metrics(corpus, run, o.seed, o.resamples);
    {
        auto f = open_out(out / "metrics.jsonl");
        write_metrics_jsonl(report, f);
    }
    const std::string table = metrics_table(report);
    write_text(out / "metrics.txt", table);
    write_manifest(out, manifest("evaluate",
                                 Json{{"agent", o.agent.empty() ? run.agent_id : o.agent},
                                      {"granularities", granularity_list(gs)},
                                      {"seed", o.seed},
                                      {"jobs", o.jobs},
                                      {"vlm", o.vlm},
                                      {"resamples", o.resamples},
                                      {"prompts", o.prompts}},
                                 inputs));
    log << table;
    return kExitOk;
}

struct AttackOptions {
    std::string corpus;
    std::string agent;
    std::string decisions;
    std::string granularity = "city";
    std::string geocoder = "live";
    std::string cache;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::string out;
    std::string vlm = "live";
    std::string prompts;
};

inline std::unique_ptr<Geocoder> make_geocoder(const std::string& spec, const std::string& cache) {
    std::unique_ptr<Geocoder> g;
    if (spec == "live") {
        g = std::make_unique<GeoapifyGeocoder>(GeocoderConfig::from_env());
    } else if (spec == "mock:identity") {
        g = std::make_unique<IdentityGeocoder>();
    } else if (spec.starts_with("mock:")) {
        g = std::make_unique<FixtureGeocoder>(FixtureGeocoder::load(spec.substr(5)));
    } else {
        throw InvalidConfig("--geocoder must be live, mock:identity or mock:<fixture>");
    }
    if (!cache.empty()) g = std::make_unique<CachingGeocoder>(std::move(g), cache);
    return g;
}

// Exit 3 when some geocoder calls failed; results written are then partial.
inline int cmd_attack(const AttackOptions& o, std::ostream& log) {
    using namespace cli_detail;
    if (o.agent.empty() == o.decisions.empty()) throw InvalidConfig("give exactly one of --agent or --decisions");
    const auto corpus = read_corpus(std::filesystem::path(o.corpus));
    const auto g = parse_granularity(o.granularity);
    if (!g) throw InvalidConfig("unknown granularity: " + o.granularity);
    const std::vector<Granularity> gs{*g};
    prepare_out_dir(o.out);
    const std::filesystem::path out(o.out);
    Json inputs{{"corpus", o.corpus}, {"corpus_fnv1a64", fingerprint(o.corpus)}};
    EvaluationRun run;
    if (!o.decisions.empty()) {
        run = read_decisions(o.decisions, corpus, gs);
        inputs["decisions"] = o.decisions;
        inputs["decisions_fnv1a64"] = fingerprint(o.decisions);
    } else {
        auto vlm = VlmSource::parse(o.vlm);
        AgentContext ctx;
        ctx.seed = o.seed;
        ctx.prompts = load_prompts(o.prompts);
        ctx.chat_client = [&](const std::string&) { return vlm.client("moderator"); };
        auto agent = make_agent(o.agent, ctx);
        run = run_agent(*agent, corpus, gs, o.jobs);
        auto f = open_out(out / "decisions.jsonl");
        write_decisions(run, corpus, f);
    }
    if (o.geocoder.starts_with("mock:") && o.geocoder != "mock:identity") {
        inputs["geocoder_fixture_fnv1a64"] = fingerprint(o.geocoder.substr(5));
    }
    auto geocoder = make_geocoder(o.geocoder, o.cache);
    const auto report = run_attack(corpus, run.flags(*g), *geocoder, *g, default_attack_thresholds(), o.jobs);
    {
        auto f = open_out(out / "attack.jsonl");
        for (const auto& r : report.records) {
            Json j{{"conversation_id", r.conversation_id},
                   {"status", to_string(r.status)},
                   {"query", r.query ? query_to_json(*r.query) : Json(nullptr)},
                   {"candidates", r.candidates},
                   {"error_km", r.status == AttackStatus::Unavailable ? Json(nullptr) : km_to_json(r.error_km)}};
            f << dump_line(j) << '\n';
        }
    }
    write_cdf_csv(out / "cdf.csv", report.cdf);
    const Json summary{{"agent", run.agent_id},
                       {"granularity", to_string(*g)},
                       {"conversations", report.records.size()},
                       {"scored", report.records.size() - report.unavailable},
                       {"unavailable", report.unavailable},
                       {"partial", report.partial()},
                       {"within_5km", report.within_5km},
                       {"within_20km", report.within_20km}};
    write_text(out / "summary.json", summary.dump(2) + "\n");
    write_manifest(out, manifest("attack",
                                 Json{{"agent", o.agent.empty() ? run.agent_id : o.agent},
                                      {"granularity", to_string(*g)},
                                      {"geocoder", o.geocoder},
                                      {"cache", o.cache},
                                      {"seed", o.seed},
                                      {"jobs", o.jobs},
                                      {"vlm", o.vlm},
                                      {"prompts", o.prompts}},
                                 inputs));
    log << "within 5 km: " << fixed4(report.within_5km) << "  within 20 km: " << fixed4(report.within_20km)
        << "  conversations: " << report.records.size() << "\n";
    if (report.partial()) {
        log << "partial: geocoder unavailable for " << report.unavailable << " conversation(s)\n";
        return kExitService;
    }
    return kExitOk;
}

struct SynthesizeOptions {
    std::string images;
    std::string out;
    std::string vlm = "live";
    int max_turns = kDefaultMaxQuestions;
    std::string querier_model;
    std::string answerer_model;
    std::string extractor_model;
    std::string prompts;
    std::size_t jobs = 1;
};

// Mock channels: "querier", "answerer", "extractor", optionally suffixed
// with ":<image id>" for per-image scripts. Every image gets fresh clients.
inline int cmd_synthesize(const SynthesizeOptions& o, std::ostream& log) {
    using namespace cli_detail;
    const auto images = read_image_metadata(o.images);
    prepare_out_dir(o.out);
    const std::filesystem::path out(o.out);
    auto vlm = VlmSource::parse(o.vlm);
    const PromptSet prompts = load_prompts(o.prompts);
    SynthesisOptions so;
    so.max_turns = o.max_turns;
    if (!o.querier_model.empty()) so.querier_model = o.querier_model;
    if (!o.answerer_model.empty()) so.answerer_model = o.answerer_model;
    if (!o.extractor_model.empty()) so.extractor_model = o.extractor_model;

    struct Outcome {
        std::optional<Conversation> conversation;
        std::optional<Conversation> partial;
        std::string error;
    };
    std::vector<SynthesisClients> clients;
    for (const auto& img : images) {
        clients.push_back(SynthesisClients{vlm.client_for("querier", img.id, false),
                                           vlm.client_for("answerer", img.id, false),
                                           vlm.client_for("extractor", img.id, false)});
    }
    std::vector<Outcome> outcomes(images.size());
    parallel_for(images.size(), o.jobs, [&](std::size_t i) {
        DialogueSynthesizer synth(clients[i], prompts, so);
        try {
            outcomes[i].conversation = synth.synthesize(images[i]);
        } catch (const SynthesisParseError& e) {
            outcomes[i].partial = e.partial();
            outcomes[i].error = e.what();
        }
    });
    std::vector<Conversation> done;
    std::size_t failed = 0;
    std::size_t empty = 0;
    auto partial_out = open_out(out / "partial.jsonl");
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        if (outcomes[i].conversation) {
            if (outcomes[i].conversation->turns.empty()) {
                ++empty;
                log << "skipped " << images[i].id << ": querier asked no question\n";
            } else {
                done.push_back(std::move(*outcomes[i].conversation));
            }
        } else {
            ++failed;
            log << "failed " << images[i].id << ": " << outcomes[i].error << "\n";
            Json j = conversation_to_json(*outcomes[i].partial);
            j["error"] = outcomes[i].error;
            partial_out << dump_line(j) << '\n';
        }
    }
    write_corpus(done, out / "corpus.jsonl");
    write_manifest(out, manifest("synthesize",
                                 Json{{"vlm", o.vlm},
                                      {"max_turns", o.max_turns},
                                      {"querier_model", o.querier_model},
                                      {"answerer_model", o.answerer_model},
                                      {"extractor_model", o.extractor_model},
                                      {"prompts", o.prompts},
                                      {"jobs", o.jobs}},
                                 Json{{"images", o.images}, {"images_fnv1a64", fingerprint(o.images)}}));
    log << "synthesized " << done.size() << " conversation(s), " << failed << " failed, " << empty << " empty\n";
    return failed > 0 ? kExitData : kExitOk;
}

struct ProbeOptions {
    std::string images;
    std::string out;
    std::string vlm = "live";
    std::string model;
    std::string prompts;
    std::vector<double> thresholds;
    std::size_t jobs = 1;
};

// Image list lines: {id?, image_ref, latitude, longitude}. A reply that stays
// unparseable is recorded with infinite error and counted separately.
inline int cmd_probe(const ProbeOptions& o, std::ostream& log) {
    using namespace cli_detail;
    struct Item {
        std::string id;
        std::string image_ref;
        GeoCoordinate truth;
    };
    std::vector<Item> items;
    for (const auto& [line, j] : read_json_lines(o.images)) {
        if (!j.is_object()) throw MalformedRecord(line, "image record must be a JSON object");
        const std::string ref = corpus_detail::required_string(j, "image_ref", line);
        for (const char* k : {"latitude", "longitude"}) {
            if (!j.contains(k)) throw MissingRequiredField(line, k);
        }
        const auto lat = parse_degrees(j["latitude"], "latitude", line);
        const auto lon = parse_degrees(j["longitude"], "longitude", line);
        if (!lat || !lon) throw MalformedRecord(line, "ground truth coordinates required");
        try {
            items.push_back(Item{j.contains("id") ? corpus_detail::required_string(j, "id", line) : ref, ref,
                                 GeoCoordinate(*lat, *lon)});
        } catch (const InvalidCoordinate& e) {
            throw MalformedRecord(line, e.what());
        }
    }
    prepare_out_dir(o.out);
    const std::filesystem::path out(o.out);
    auto vlm = VlmSource::parse(o.vlm);
    const PromptSet prompts = load_prompts(o.prompts);
    std::vector<std::shared_ptr<ChatClient>> clients;
    for (const auto& it : items) clients.push_back(vlm.client_for("prober", it.id, false));
    std::vector<ProbeOutcome> outcomes(items.size(), Refusal{"not run"});
    std::vector<std::string> parse_errors(items.size());
    parallel_for(items.size(), o.jobs, [&](std::size_t i) {
        LtmProber prober(clients[i], prompts, o.model.empty() ? std::nullopt : std::optional(o.model));
        try {
            outcomes[i] = prober.probe(items[i].image_ref);
        } catch (const LtmParseError& e) {
            parse_errors[i] = e.what();
            outcomes[i] = Refusal{"unparseable"};
        }
    });
    std::vector<GeoCoordinate> truths;
    for (const auto& it : items) truths.push_back(it.truth);
    const auto thresholds = o.thresholds.empty() ? default_geolocation_thresholds() : o.thresholds;
    const auto summary = evaluate_geolocation(outcomes, truths, thresholds);
    std::size_t unparseable = 0;
    {
        auto f = open_out(out / "predictions.jsonl");
        for (std::size_t i = 0; i < items.size(); ++i) {
            Json j{{"id", items[i].id},
                   {"image_ref", items[i].image_ref},
                   {"prediction", probe_outcome_to_json(outcomes[i])},
                   {"error_km", km_to_json(summary.errors_km[i])}};
            if (!parse_errors[i].empty()) {
                ++unparseable;
                j["parse_error"] = parse_errors[i];
            }
            f << dump_line(j) << '\n';
        }
    }
    Json fractions = Json::array();
    for (const auto& p : summary.fractions) fractions.push_back(Json{{"km", p.km}, {"fraction", p.fraction}});
    const Json s{{"images", items.size()},
                 {"refusals", summary.refusals - unparseable},
                 {"unparseable", unparseable},
                 {"median_km", summary.median ? km_to_json(*summary.median) : Json(nullptr)},
                 {"fractions", fractions}};
    write_text(out / "summary.json", s.dump(2) + "\n");
    Json th = Json::array();
    for (double t : thresholds) th.push_back(t);
    write_manifest(out, manifest("probe",
                                 Json{{"vlm", o.vlm}, {"model", o.model}, {"prompts", o.prompts}, {"thresholds", th},
                                      {"jobs", o.jobs}},
                                 Json{{"images", o.images}, {"images_fnv1a64", fingerprint(o.images)}}));
    log << "median error: " << (summary.median ? format_km(*summary.median) : std::string("n/a")) << " km over "
        << items.size() << " image(s)\n";
    return kExitOk;
}

struct ServeOptions {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string storage = "gateway-data";
    std::string vlm = "live";
    std::string upstream_model;
    std::string api_token;
    std::string admin_token;
    std::string prompts;
    std::uint64_t seed = 0;
};

inline std::atomic<GatewayServer*>& active_server() {
    static std::atomic<GatewayServer*> s{nullptr};
    return s;
}

inline int cmd_serve(const ServeOptions& o, std::ostream& log) {
    using namespace cli_detail;
    auto vlm = std::make_shared<VlmSource>(VlmSource::parse(o.vlm));
    const PromptSet prompts = load_prompts(o.prompts);
    StoreOptions so;
    so.directory = o.storage;
    so.upstream = vlm->client("upstream", true);
    if (!o.upstream_model.empty()) so.upstream_model = o.upstream_model;
    auto moderator_client = vlm->client("moderator", true);
    so.agents = [moderator_client, prompts, seed = o.seed](const std::string& id) -> std::shared_ptr<ModerationAgent> {
        AgentContext ctx;
        ctx.seed = seed;
        ctx.prompts = prompts;
        ctx.chat_client = [moderator_client](const std::string&) { return moderator_client; };
        return make_agent(id, ctx);
    };
    ConversationStore store(std::move(so));
    GatewayServer server(store, GatewayOptions{o.api_token, o.admin_token});
    if (o.port == 0) {
        const int port = server.bind_to_any_port(o.host);
        if (port < 0) throw ServiceError("cannot bind " + o.host);
        log << "listening on " << o.host << ":" << port << std::endl;
    } else {
        if (!server.bind(o.host, o.port)) throw ServiceError("cannot bind " + o.host + ":" + std::to_string(o.port));
        log << "listening on " << o.host << ":" << o.port << std::endl;
    }
    active_server() = &server;
    std::signal(SIGINT, [](int) {
        if (auto* s = active_server().load()) s->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (auto* s = active_server().load()) s->stop();
    });
    server.listen_after_bind();
    active_server() = nullptr;
    return kExitOk;
}

struct ImportOptions {
    std::string in;
    std::string out;
};

inline int cmd_import(const ImportOptions& o, std::ostream& log) {
    const auto corpus = import_benchmark(o.in);
    write_corpus(corpus, std::filesystem::path(o.out));
    log << "imported " << corpus.size() << " conversation(s)\n";
    return kExitOk;
}

inline std::string env_or(const char* name, std::string fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

// Entry point shared by the geomod binary and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"geolocation-privacy moderation toolkit", "geomod"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    EvaluateOptions ev;
    auto* evaluate = app.add_subcommand("evaluate", "run a moderation agent over a corpus and score it");
    evaluate->add_option("--corpus", ev.corpus, "canonical corpus (JSONL)")->required();
    evaluate->add_option("--agent", ev.agent, "random | regex | oracle | flag-all | flag-none | vlm:<model>");
    evaluate->add_option("--decisions", ev.decisions, "replay decisions from a decisions.jsonl instead");
    evaluate->add_option("--granularity", ev.granularities, "repeatable; default all five");
    evaluate->add_option("--seed", ev.seed);
    evaluate->add_option("--jobs", ev.jobs)->check(CLI::PositiveNumber);
    evaluate->add_option("--out", ev.out)->required();
    evaluate->add_option("--vlm", ev.vlm, "live | mock:<script>");
    evaluate->add_option("--prompts", ev.prompts, "prompt directory overriding the built-in prompts");
    evaluate->add_option("--resamples", ev.resamples)->check(CLI::PositiveNumber);

    AttackOptions at;
    auto* attack = app.add_subcommand("attack", "geocode what survives moderation");
    attack->add_option("--corpus", at.corpus)->required();
    attack->add_option("--agent", at.agent);
    attack->add_option("--decisions", at.decisions);
    attack->add_option("--granularity", at.granularity);
    attack->add_option("--geocoder", at.geocoder, "live | mock:identity | mock:<fixture>");
    attack->add_option("--cache", at.cache, "JSONL response cache");
    attack->add_option("--seed", at.seed);
    attack->add_option("--jobs", at.jobs)->check(CLI::PositiveNumber);
    attack->add_option("--out", at.out)->required();
    attack->add_option("--vlm", at.vlm);
    attack->add_option("--prompts", at.prompts);

    SynthesizeOptions sy;
    auto* synthesize = app.add_subcommand("synthesize", "generate synthetic dialogues from image metadata");
    synthesize->add_option("--images", sy.images, "image metadata (JSONL)")->required();
    synthesize->add_option("--out", sy.out)->required();
    synthesize->add_option("--vlm", sy.vlm);
    synthesize->add_option("--max-turns", sy.max_turns)->check(CLI::PositiveNumber);
    synthesize->add_option("--querier-model", sy.querier_model);
    synthesize->add_option("--answerer-model", sy.answerer_model);
    synthesize->add_option("--extractor-model", sy.extractor_model);
    synthesize->add_option("--prompts", sy.prompts);
    synthesize->add_option("--jobs", sy.jobs)->check(CLI::PositiveNumber);

    ProbeOptions pr;
    auto* probe = app.add_subcommand("probe", "least-to-most geolocation probe and error distances");
    probe->add_option("--images", pr.images, "JSONL with image_ref, latitude, longitude")->required();
    probe->add_option("--out", pr.out)->required();
    probe->add_option("--vlm", pr.vlm);
    probe->add_option("--model", pr.model);
    probe->add_option("--prompts", pr.prompts);
    probe->add_option("--threshold", pr.thresholds, "km; repeatable");
    probe->add_option("--jobs", pr.jobs)->check(CLI::PositiveNumber);

    ServeOptions sv;
    sv.host = env_or("GATEWAY_HOST", sv.host);
    sv.port = std::stoi(env_or("GATEWAY_PORT", std::to_string(sv.port)));
    sv.storage = env_or("GATEWAY_STORAGE", sv.storage);
    sv.api_token = env_or("GATEWAY_API_TOKEN", "");
    sv.admin_token = env_or("GATEWAY_ADMIN_TOKEN", "");
    auto* serve = app.add_subcommand("serve", "run the moderation gateway");
    serve->add_option("--host", sv.host);
    serve->add_option("--port", sv.port, "0 picks a free port");
    serve->add_option("--storage", sv.storage, "event log directory");
    serve->add_option("--vlm", sv.vlm);
    serve->add_option("--upstream-model", sv.upstream_model);
    serve->add_option("--api-token", sv.api_token);
    serve->add_option("--admin-token", sv.admin_token);
    serve->add_option("--prompts", sv.prompts);
    serve->add_option("--seed", sv.seed);

    ImportOptions im;
    auto* import = app.add_subcommand("import", "convert published benchmark records to the canonical corpus");
    import->add_option("--in", im.in, "file or directory")->required();
    import->add_option("--out", im.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion& e) {
        out << kVersion << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (*evaluate) return cmd_evaluate(ev, out);
        if (*attack) return cmd_attack(at, out);
        if (*synthesize) return cmd_synthesize(sy, out);
        if (*probe) return cmd_probe(pr, out);
        if (*serve) return cmd_serve(sv, out);
        if (*import) return cmd_import(im, out);
    } catch (const InvalidConfig& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

}  // namespace geomod
