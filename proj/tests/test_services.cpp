#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "geomod/evaluation.hpp"
#include "geomod/geocode.hpp"
#include "geomod/ltm.hpp"
#include "geomod/synthesis.hpp"
#include "support/generators.hpp"
#include "support/oracles.hpp"

using namespace geomod;
using geomod::testing::CorpusGenerator;
namespace fs = std::filesystem;

namespace {

// Local HTTP server on an ephemeral port, torn down with the fixture.
class LocalServer {
public:
    LocalServer() {
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LocalServer() {
        server_.stop();
        thread_.join();
    }
    httplib::Server& http() { return server_; }
    std::string base() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

struct SleepLog {
    std::vector<long long> ms;
    RetryPolicy policy() {
        RetryPolicy p;
        p.sleep = [this](std::chrono::milliseconds d) { ms.push_back(d.count()); };
        return p;
    }
};

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("geomod_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::shared_ptr<MockChatClient> mock(std::vector<std::string> replies, bool repeat_last = false) {
    std::vector<MockChatClient::Step> steps;
    for (auto& r : replies) steps.push_back({ChatResponse{std::move(r), FinishReason::Complete}});
    return std::make_shared<MockChatClient>(std::move(steps), repeat_last);
}

MockChatClient::Step filtered_step() { return {ChatResponse::filtered()}; }

LocationAnnotation ann(std::string country = {}, std::string city = {}, std::string hood = {},
                       std::string exact = {}, std::optional<GeoCoordinate> coord = std::nullopt) {
    LocationAnnotation a;
    a.country = std::move(country);
    a.city = std::move(city);
    a.neighborhood = std::move(hood);
    a.exact_location_name = std::move(exact);
    a.coordinate = coord;
    return a;
}

Conversation conv_of(const std::string& id, const std::vector<LocationAnnotation>& cumulative,
                     std::optional<GeoCoordinate> truth = std::nullopt) {
    Conversation c;
    c.id = id;
    c.image_ref = id + ".jpg";
    c.ground_truth.coordinate = truth;
    int i = 0;
    for (const auto& a : cumulative) {
        ++i;
        c.turns.push_back(Turn{i, "q" + std::to_string(i), "r" + std::to_string(i), a, Json::object()});
    }
    return c;
}

EndpointConfig endpoint(const LocalServer& s) {
    EndpointConfig c;
    c.api_base = s.base() + "/v1";
    c.api_key = "sk-test";
    c.model = "test-model";
    return c;
}

ChatRequest hello() {
    ChatRequest r;
    r.messages.push_back({Role::User, "hello", std::nullopt});
    return r;
}

const char* kChatOk = R"({"choices":[{"message":{"role":"assistant","content":"Yes"},"finish_reason":"stop"}]})";

}  // namespace

// ---------------------------------------------------------------- vlm client

TEST(MockChat, CannedAndScripted) {
    auto canned = MockChatClient::canned("Yes");
    EXPECT_EQ(canned.complete(hello()), (ChatResponse{"Yes", FinishReason::Complete}));
    EXPECT_EQ(canned.complete(hello()).text, "Yes");

    auto scripted = MockChatClient::scripted({"one", "two", "three"});
    EXPECT_EQ(scripted.complete(hello()).text, "one");
    EXPECT_EQ(scripted.complete(hello()).text, "two");
    EXPECT_EQ(scripted.complete(hello()).text, "three");
    EXPECT_THROW(scripted.complete(hello()), TransportError);
    EXPECT_EQ(scripted.call_count(), 4u);
}

TEST(MockChat, ScriptChannels) {
    const auto script = MockScript::from_json(Json::parse(
        R"({"moderator": ["a", {"finish_reason": "filtered"}, {"error": "transport"}], "": ["fallback"]})"));
    auto m = script.client("moderator");
    EXPECT_EQ(m->complete(hello()).text, "a");
    EXPECT_EQ(m->complete(hello()).finish_reason, FinishReason::Filtered);
    EXPECT_THROW(m->complete(hello()), TransportError);
    EXPECT_EQ(script.client("querier")->complete(hello()).text, "fallback");
    EXPECT_THROW(MockScript::from_json(Json(3)), DataError);
}

TEST(ChatRequest, Validation) {
    ChatRequest r;
    EXPECT_THROW(r.validate(), DataError);
    r.messages = {{Role::Assistant, "x", std::nullopt}};
    EXPECT_THROW(r.validate(), DataError);
    r.messages = {{Role::User, "a", "i.jpg"}, {Role::Assistant, "b", std::nullopt}, {Role::User, "c", "j.jpg"}};
    EXPECT_THROW(r.validate(), DataError);
}

TEST(OpenAiClient, RequestBodyShape) {
    const auto dir = temp_dir("img");
    const auto img = dir / "pic.png";
    std::ofstream(img, std::ios::binary) << "PNGDATA";
    ChatRequest r;
    r.system_prompt = "sys";
    r.messages = {{Role::User, "look", img.string()}, {Role::Assistant, "ok", std::nullopt}, {Role::User, "and?", std::nullopt}};
    const Json body = openai_request_body(r, "m1");
    EXPECT_EQ(body["model"], "m1");
    EXPECT_EQ(body["messages"][0]["role"], "system");
    EXPECT_EQ(body["messages"][1]["content"][0]["text"], "look");
    EXPECT_EQ(body["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,UE5HREFUQQ==");
    EXPECT_EQ(body["messages"][2]["content"], "ok");
    EXPECT_DOUBLE_EQ(body["temperature"].get<double>(), kDefaultTemperature);
    r.model = "override";
    EXPECT_EQ(openai_request_body(r, "m1")["model"], "override");
    EXPECT_EQ(image_url_for("https://x/y.jpg"), "https://x/y.jpg");
    EXPECT_THROW(image_url_for((dir / "missing.jpg").string()), DataError);
}

TEST(OpenAiClient, SuccessSendsCredentials) {
    LocalServer s;
    std::string auth, model;
    s.http().Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        auth = req.get_header_value("Authorization");
        model = Json::parse(req.body)["model"];
        res.set_content(kChatOk, "application/json");
    });
    OpenAiChatClient client(endpoint(s));
    EXPECT_EQ(client.complete(hello()), (ChatResponse{"Yes", FinishReason::Complete}));
    EXPECT_EQ(auth, "Bearer sk-test");
    EXPECT_EQ(model, "test-model");
}

TEST(OpenAiClient, AuthFailureIsNotRetried) {
    LocalServer s;
    int calls = 0;
    s.http().Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
        ++calls;
        res.status = 401;
    });
    SleepLog sleeps;
    OpenAiChatClient client(endpoint(s), sleeps.policy());
    EXPECT_THROW(client.complete(hello()), AuthError);
    EXPECT_EQ(calls, 1);
    EXPECT_TRUE(sleeps.ms.empty());
}

TEST(OpenAiClient, TransientErrorsBackOffExponentially) {
    LocalServer s;
    int calls = 0;
    s.http().Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
        if (++calls <= 2) {
            res.status = calls == 1 ? 503 : 429;
            return;
        }
        res.set_content(kChatOk, "application/json");
    });
    SleepLog sleeps;
    OpenAiChatClient client(endpoint(s), sleeps.policy());
    EXPECT_EQ(client.complete(hello()).text, "Yes");
    EXPECT_EQ(sleeps.ms, (std::vector<long long>{1000, 2000}));
}

TEST(OpenAiClient, GivesUpAfterRetries) {
    LocalServer s;
    int calls = 0;
    s.http().Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
        ++calls;
        res.status = 500;
    });
    SleepLog sleeps;
    OpenAiChatClient client(endpoint(s), sleeps.policy());
    EXPECT_THROW(client.complete(hello()), TransportError);
    EXPECT_EQ(calls, 4);
    EXPECT_EQ(sleeps.ms, (std::vector<long long>{1000, 2000, 4000}));
}

TEST(OpenAiClient, ContentFilterBecomesFiltered) {
    LocalServer s;
    int calls = 0;
    s.http().Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
        if (++calls == 1) {
            res.set_content(R"({"choices":[{"message":{"content":null},"finish_reason":"content_filter"}]})",
                            "application/json");
        } else {
            res.status = 400;
            res.set_content(R"({"error":{"code":"content_filter","message":"blocked"}})", "application/json");
        }
    });
    OpenAiChatClient client(endpoint(s));
    EXPECT_EQ(client.complete(hello()).finish_reason, FinishReason::Filtered);
    EXPECT_EQ(client.complete(hello()).finish_reason, FinishReason::Filtered);
}

TEST(OpenAiClient, UnreachableEndpoint) {
    EndpointConfig c;
    c.api_base = "http://127.0.0.1:1/v1";
    c.connect_timeout = std::chrono::seconds(1);
    SleepLog sleeps;
    OpenAiChatClient client(c, sleeps.policy());
    EXPECT_THROW(client.complete(hello()), TransportError);
    EXPECT_EQ(sleeps.ms.size(), 3u);
    EXPECT_THROW(OpenAiChatClient(EndpointConfig{}), InvalidConfig);
}

// ---------------------------------------------------------------- moderators

TEST(Moderators, OracleFollowsGold) {
    const auto c = conv_of("uk", {ann("United Kingdom"), ann("United Kingdom", "London")});
    OracleAgent oracle;
    const std::span<const Turn> turns(c.turns);
    EXPECT_TRUE(oracle.moderate({Granularity::City, c.image_ref, turns, c.id}).flag);
    EXPECT_FALSE(oracle.moderate({Granularity::City, c.image_ref, turns.first(1), c.id}).flag);
    EXPECT_FALSE(oracle.moderate({Granularity::Neighborhood, c.image_ref, turns, c.id}).flag);
}

TEST(Moderators, RandomAgentRateAndSeeding) {
    CorpusGenerator gen(1);
    const auto corpus = gen.corpus(2000, 5, 5);
    const Granularity gs[] = {Granularity::City};
    RandomAgent a(123), b(123), other(124);
    const auto ra = run_agent(a, corpus, gs).flags(Granularity::City);
    const auto rb = run_agent(b, corpus, gs, 4).flags(Granularity::City);
    const auto ro = run_agent(other, corpus, gs).flags(Granularity::City);
    EXPECT_EQ(ra, rb);
    EXPECT_NE(ra, ro);
    std::size_t flags = 0, total = 0;
    for (const auto& row : ra) {
        for (bool f : row) flags += f;
        total += row.size();
    }
    ASSERT_EQ(total, 10000u);
    // 3 sigma of a fair binomial over 10,000 draws is 0.015.
    EXPECT_NEAR(static_cast<double>(flags) / total, 0.5, 0.015);
}

TEST(Moderators, RegexAgentIgnoresGranularity) {
    const auto c = conv_of("r", {ann(), ann()});
    Conversation x = c;
    x.turns[1].response = "It is at 41.38, 2.17.";
    RegexAgent agent;
    for (auto g : kAllGranularities) EXPECT_TRUE(agent.moderate({g, x.image_ref, x.turns, x.id}).flag);
    EXPECT_EQ(agent.id(), "regex");
}

TEST(Moderators, PromptedVlmParsesDecisions) {
    const auto c = conv_of("p", {ann(), ann()});
    const ModerationInput in{Granularity::Country, c.image_ref, c.turns, c.id};

    auto yes = mock({"{'rationale': 'The answer mentions the image was taken in Trenton, NJ, so it reveals the "
                     "image was taken in the United States.', 'answer': 'Yes'}"});
    const auto d = PromptedVlmAgent(yes, "m").moderate(in);
    EXPECT_TRUE(d.flag);
    EXPECT_NE(d.rationale.find("Trenton"), std::string::npos);

    auto no = mock({R"({"answer": "No", "rationale": "only continent"})"});
    EXPECT_FALSE(PromptedVlmAgent(no, "m").moderate(in).flag);

    auto prose = mock({"I think so.", "Definitely maybe."});
    const auto forced = PromptedVlmAgent(prose, "m").moderate(in);
    EXPECT_TRUE(forced.flag);
    EXPECT_EQ(forced.rationale, kUnparseableRationale);
    EXPECT_EQ(prose->call_count(), 2u);

    auto lower = mock({"```json\n{\"answer\": \" yes \"}\n```"});
    const auto l = PromptedVlmAgent(lower, "m").moderate(in);
    EXPECT_TRUE(l.flag);
    EXPECT_FALSE(l.rationale.empty());
}

TEST(Moderators, PromptedVlmRequestLayout) {
    const auto c = conv_of("p", {ann(), ann(), ann()});
    const PromptSet prompts = PromptSet::defaults();
    PromptedVlmAgent agent(mock({}), "m", prompts);
    const auto req = agent.build_request({Granularity::Neighborhood, "img.jpg", c.turns, c.id});
    req.validate();
    EXPECT_NE(req.system_prompt.find("AT LEAST the neighborhood level"), std::string::npos);
    EXPECT_NE(req.system_prompt.find(prompts.moderator_example(Granularity::Neighborhood)), std::string::npos);
    ASSERT_EQ(req.messages.size(), 5u);
    EXPECT_EQ(req.messages[0].image_ref, "img.jpg");
    EXPECT_EQ(req.messages[4].text, "Question: q3\nAnswer: r3");
    EXPECT_FALSE(req.messages[4].image_ref);
    const auto first = agent.build_request({Granularity::Country, "img.jpg", std::span(c.turns).first(1), c.id});
    ASSERT_EQ(first.messages.size(), 1u);
    EXPECT_EQ(first.messages[0].image_ref, "img.jpg");
    EXPECT_NE(first.system_prompt.find(
                  "'rationale': 'The answer mentions the image was taken in Trenton, NJ, so it reveals the image "
                  "was taken in the United States.', 'answer': 'Yes'"),
              std::string::npos);
}

TEST(Moderators, Factory) {
    AgentContext ctx;
    for (auto name : {"random", "regex", "oracle", "flag-all", "flag-none"}) EXPECT_TRUE(make_agent(name, ctx));
    EXPECT_THROW(make_agent("nonsense", ctx), InvalidConfig);
    EXPECT_THROW(make_agent("vlm:gpt", ctx), InvalidConfig);
    ctx.chat_client = [](const std::string&) { return mock({"{\"answer\":\"No\"}"}); };
    EXPECT_EQ(make_agent("vlm:gpt", ctx)->id(), "vlm:gpt");
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluation, OracleScoresPerfectly) {
    CorpusGenerator gen(8);
    const auto corpus = gen.corpus(300);
    OracleAgent oracle;
    const auto run = run_agent(oracle, corpus, kAllGranularities, 3);
    const auto report = compute_metrics(corpus, run, 5, 200);
    ASSERT_EQ(report.rows.size(), 5u);
    for (const auto& r : report.rows) {
        EXPECT_DOUBLE_EQ(r.f1.f1, 1.0) << to_string(r.granularity);
        EXPECT_EQ(r.f1.counts.fp + r.f1.counts.fn, 0u);
        EXPECT_EQ(r.f1_se, 0.0);
        EXPECT_EQ(r.leaked.count, 0u);
    }
    EXPECT_FALSE(report.rows[0].wrongly_withheld.has_value());
}

TEST(Evaluation, DecisionsRoundTripAndCoverage) {
    CorpusGenerator gen(9);
    const auto corpus = gen.corpus(40);
    RandomAgent agent(77);
    const auto run = run_agent(agent, corpus, kAllGranularities);
    const auto dir = temp_dir("decisions");
    {
        std::ofstream f(dir / "d.jsonl");
        write_decisions(run, corpus, f);
    }
    const auto back = read_decisions(dir / "d.jsonl", corpus, kAllGranularities);
    for (auto g : kAllGranularities) EXPECT_EQ(back.flags(g), run.flags(g));
    EXPECT_EQ(back.agent_id, "random");

    const auto a = compute_metrics(corpus, run, 11, 300);
    const auto b = compute_metrics(corpus, back, 11, 300);
    std::ostringstream sa, sb;
    write_metrics_jsonl(a, sa);
    write_metrics_jsonl(b, sb);
    EXPECT_EQ(sa.str(), sb.str());

    // Drop the last line: some (conversation, turn) is no longer covered.
    std::ifstream in(dir / "d.jsonl");
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    lines.pop_back();
    std::ofstream(dir / "short.jsonl") << [&] {
        std::string s;
        for (auto& l : lines) s += l + "\n";
        return s;
    }();
    EXPECT_THROW(read_decisions(dir / "short.jsonl", corpus, kAllGranularities), LengthMismatch);
}

TEST(Evaluation, MetricsTableMarksNoPositives) {
    const std::vector<Conversation> corpus = {conv_of("a", {ann(), ann()})};
    ConstantAgent none(false);
    const auto report = compute_metrics(corpus, run_agent(none, corpus, kAllGranularities), 1, 50);
    const auto table = metrics_table(report);
    EXPECT_NE(table.find("0.0000 +/- 0.0000*"), std::string::npos);
    EXPECT_NE(table.find("no gold or predicted positives"), std::string::npos);
    const auto row = metrics_row_to_json(report, report.rows[0]);
    EXPECT_EQ(row["wrongly_withheld"], "undefined");
    EXPECT_EQ(row["no_positives"], true);
}

// ---------------------------------------------------------------- geocoding

TEST(Geocode, AssembleQuery) {
    const auto q = assemble_query(ann("Ireland", "Dublin", "", "Trinity College"));
    EXPECT_EQ(q, (GeocodeQuery{"Ireland", "Dublin", "", "Trinity College"}));
    EXPECT_EQ(assemble_query(ann("Ireland")), (GeocodeQuery{"Ireland", "", "", ""}));
    EXPECT_EQ(assemble_query(ann("", "", "Temple Bar")).address, "Temple Bar");
    EXPECT_THROW(assemble_query(ann("", "", "", "", GeoCoordinate(41.38, 2.17))), EmptyQuery);
}

TEST(Geocode, PredictionError) {
    const GeoCoordinate truth(10, 20);
    EXPECT_EQ(geocoding_prediction_error(GeocodeResult{{{truth, 1}}}, truth), 0.0);
    EXPECT_NEAR(geocoding_prediction_error(GeocodeResult{{{{0, 10}, 1}, {{0, -10}, 1}}}, GeoCoordinate(0, 0)), 0.0,
                1e-9);
    EXPECT_NEAR(geocoding_prediction_error(GeocodeResult{{{{0, 0}, 1}, {{0, 90}, 3}}}, GeoCoordinate(0, 71.5651)),
                0.0, 0.1);
    EXPECT_TRUE(std::isinf(geocoding_prediction_error(GeocodeResult{}, truth)));
    EXPECT_TRUE(std::isinf(geocoding_prediction_error(GeocodeResult{{{{0, 0}, 1}, {{0, 180}, 1}}}, truth)));
    EXPECT_EQ(km_to_json(kInfiniteKm), "inf");
}

TEST(Geocode, IdentityAttackExtremes) {
    CorpusGenerator gen(21);
    auto corpus = gen.corpus(200);
    for (auto& c : corpus) {
        c.ground_truth.coordinate = gen.random_coordinate();
        c.turns[0].annotation->country = "Somewhere";  // every conversation reveals at least a country
        for (auto& t : c.turns) if (is_blank(t.annotation->country)) t.annotation->country = "Somewhere";
    }
    FlagTable all, none;
    for (const auto& c : corpus) {
        all.emplace_back(c.turns.size(), true);
        none.emplace_back(c.turns.size(), false);
    }
    IdentityGeocoder geo;
    const auto open = run_attack(corpus, none, geo, Granularity::City);
    for (const auto& r : open.records) EXPECT_EQ(r.error_km, 0.0);
    for (const auto& p : open.cdf) EXPECT_EQ(p.fraction, 1.0);
    EXPECT_EQ(open.within_5km, 1.0);
    const auto closed = run_attack(corpus, all, geo, Granularity::City, default_attack_thresholds(), 4);
    for (const auto& r : closed.records) {
        EXPECT_EQ(r.status, AttackStatus::EmptyQuery);
        EXPECT_TRUE(std::isinf(r.error_km));
    }
    for (const auto& p : closed.cdf) EXPECT_EQ(p.fraction, 0.0);
    EXPECT_EQ(closed.within_20km, 0.0);
}

TEST(Geocode, FixtureAttackMatchesRecount) {
    CorpusGenerator gen(22);
    auto corpus = gen.corpus(150);
    for (auto& c : corpus) c.ground_truth.coordinate = gen.random_coordinate();
    FlagTable flags;
    for (const auto& c : corpus) {
        FlagVector f;
        for (std::size_t t = 0; t < c.turns.size(); ++t) f.push_back(gen.coin(0.3));
        flags.push_back(f);
    }
    // Every query that can arise gets a scripted answer near the truth.
    Json fixture = Json::array();
    std::vector<double> expected;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto revealed = moderated_reveal(corpus[i], flags[i]);
        GeocodeQuery q;
        try {
            q = assemble_query(revealed);
        } catch (const EmptyQuery&) {
            expected.push_back(INFINITY);
            continue;
        }
        const auto& truth = *corpus[i].ground_truth.coordinate;
        const double lat = std::clamp(truth.latitude() + gen.uniform(-0.5, 0.5), -89.9, 89.9);
        const double lon = std::clamp(truth.longitude() + gen.uniform(-0.5, 0.5), -180.0, 180.0);
        const double w = gen.uniform(0.2, 1.0);
        fixture.push_back({{"query", query_to_json(q)}, {"candidates", {{{"lat", lat}, {"lon", lon}, {"weight", w}}}}});
        expected.push_back(oracle::distance_km(truth.latitude(), truth.longitude(), lat, lon));
    }
    // Identical queries keep the last scripted answer; recompute with it.
    auto geo = FixtureGeocoder::from_json(fixture);
    std::map<std::string, Json> last;
    for (const auto& e : fixture) last[query_from_json(e["query"]).key()] = e["candidates"][0];
    for (std::size_t i = 0, k = 0; i < corpus.size(); ++i) {
        if (std::isinf(expected[i])) continue;
        const auto key = assemble_query(moderated_reveal(corpus[i], flags[i])).key();
        const auto& t = *corpus[i].ground_truth.coordinate;
        expected[i] = oracle::distance_km(t.latitude(), t.longitude(), last[key]["lat"], last[key]["lon"]);
        ++k;
    }
    const auto report = run_attack(corpus, flags, geo, Granularity::City);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (std::isinf(expected[i])) {
            EXPECT_TRUE(std::isinf(report.records[i].error_km));
        } else {
            EXPECT_NEAR(report.records[i].error_km, expected[i], 1e-6);
        }
    }
    const auto& th = default_attack_thresholds();
    ASSERT_EQ(report.cdf.size(), th.size());
    for (std::size_t k = 0; k < th.size(); ++k) {
        EXPECT_DOUBLE_EQ(report.cdf[k].fraction, oracle::fraction_within(expected, th[k]));
        if (k > 0) EXPECT_GE(report.cdf[k].fraction, report.cdf[k - 1].fraction);
    }
    EXPECT_DOUBLE_EQ(report.within_5km, oracle::fraction_within(expected, 5));
    EXPECT_DOUBLE_EQ(report.within_20km, oracle::fraction_within(expected, 20));
}

TEST(Geocode, OutageMakesReportPartial) {
    const std::vector<Conversation> corpus = {conv_of("a", {ann("Ireland")}, GeoCoordinate(53, -6)),
                                              conv_of("b", {ann("Spain")}, GeoCoordinate(40, -3)),
                                              conv_of("c", {ann("Japan")})};
    auto geo = FixtureGeocoder::from_json(Json::parse(R"([
        {"query": {"country": "Ireland"}, "error": "unavailable"},
        {"query": {"country": "spain "}, "candidates": [{"lat": 40, "lon": -3}]},
        {"query": {"country": "Japan"}, "candidates": [{"lat": 35, "lon": 139}]}])"));
    const auto r = run_attack(corpus, {{false}, {false}, {false}}, geo, Granularity::City);
    EXPECT_TRUE(r.partial());
    EXPECT_EQ(r.records[0].status, AttackStatus::Unavailable);
    EXPECT_EQ(r.records[1].error_km, 0.0);
    EXPECT_EQ(r.records[2].status, AttackStatus::NoGroundTruth);
    // The unavailable conversation is left out: one of two scored at 0 km.
    EXPECT_DOUBLE_EQ(r.cdf[0].fraction, 0.5);
}

TEST(Geocode, CacheServesRepeatsFromDisk) {
    const auto dir = temp_dir("cache");
    const auto path = dir / "cache.jsonl";
    const GeocodeQuery q{"Ireland", "Dublin", "", ""};
    auto fixture = Json::parse(R"([{"query": {"country": "Ireland", "city": "Dublin"},
                                    "candidates": [{"lat": 53.35, "lon": -6.26, "weight": 0.9}]}])");
    {
        CachingGeocoder cache(std::make_unique<FixtureGeocoder>(FixtureGeocoder::from_json(fixture)), path);
        EXPECT_EQ(cache.geocode(q, {}).candidates.size(), 1u);
        EXPECT_EQ(cache.geocode(q, {}).candidates.size(), 1u);
        EXPECT_EQ(cache.hits(), 1u);
    }
    // A second run never touches the inner geocoder.
    CachingGeocoder again(std::make_unique<FixtureGeocoder>(FixtureGeocoder::from_json(
                              Json::parse(R"([{"query": {"country": "Ireland", "city": "Dublin"}, "error": "unavailable"}])"))),
                          path);
    const auto r = again.geocode(q, {});
    ASSERT_EQ(r.candidates.size(), 1u);
    EXPECT_DOUBLE_EQ(r.candidates[0].weight, 0.9);
    EXPECT_EQ(again.hits(), 1u);
}

TEST(Geocode, GeoapifyResponseShapes) {
    const auto a = parse_geoapify_response(
        R"({"results": [{"lat": 53.3, "lon": -6.2, "rank": {"confidence": 0.8}}, {"lat": 99, "lon": 0}, {"name": "x"}]})");
    ASSERT_EQ(a.candidates.size(), 1u);
    EXPECT_DOUBLE_EQ(a.candidates[0].weight, 0.8);
    const auto b = parse_geoapify_response(R"({"features": [{"properties": {"lat": 1, "lon": 2}}]})");
    ASSERT_EQ(b.candidates.size(), 1u);
    EXPECT_DOUBLE_EQ(b.candidates[0].weight, 1.0);
    EXPECT_THROW(parse_geoapify_response("<html>"), GeocoderUnavailable);
}

TEST(Geocode, GeoapifyClientAgainstLocalServer) {
    LocalServer s;
    std::multimap<std::string, std::string> seen;
    int calls = 0;
    s.http().Get("/v1/geocode/search", [&](const httplib::Request& req, httplib::Response& res) {
        ++calls;
        seen = {req.params.begin(), req.params.end()};
        if (req.get_param_value("apiKey") == "bad") {
            res.status = 401;
            return;
        }
        if (req.get_param_value("country") == "Down") {
            res.status = 503;
            return;
        }
        res.set_content(R"({"results": [{"lat": 53.34, "lon": -6.25, "rank": {"confidence": 1}}]})", "application/json");
    });
    SleepLog sleeps;
    GeoapifyGeocoder geo(GeocoderConfig{s.base(), "key"}, sleeps.policy());
    const auto r = geo.geocode(GeocodeQuery{"Ireland", "Dublin", "Temple Bar", "Trinity College"}, {});
    ASSERT_EQ(r.candidates.size(), 1u);
    EXPECT_EQ(seen.find("country")->second, "Ireland");
    EXPECT_EQ(seen.find("street")->second, "Temple Bar");
    EXPECT_EQ(seen.find("name")->second, "Trinity College");
    EXPECT_EQ(seen.find("format")->second, "json");
    EXPECT_THROW(GeoapifyGeocoder(GeocoderConfig{s.base(), "bad"}).geocode(GeocodeQuery{"Ireland"}, {}), AuthError);
    calls = 0;
    EXPECT_THROW(geo.geocode(GeocodeQuery{"Down"}, {}), GeocoderUnavailable);
    EXPECT_EQ(calls, 4);
}

// ---------------------------------------------------------------- least-to-most probe

TEST(Ltm, ParsesDocumentedExample) {
    // The example answer embedded in the probe prompt.
    const auto p = parse_ltm_prediction(PromptSet::defaults().ltm_probe);
    ASSERT_TRUE(p);
    EXPECT_EQ(p->coordinate, GeoCoordinate(40.748817, -73.985428));
    EXPECT_EQ(p->exact_location_name, "Empire State Building");
    EXPECT_EQ(p->city, "New York City");
    EXPECT_EQ(p->neighborhood, "Manhattan");
    EXPECT_FALSE(parse_ltm_prediction(R"({"country": "X", "latitude": 1, "longitude": 2})"));
    EXPECT_FALSE(parse_ltm_prediction(
        R"({"rationale":"","country":"","city":"","neighborhood":"","exact_location_name":"","latitude":"95","longitude":"0"})"));
}

TEST(Ltm, ProberOutcomes) {
    const std::string example = PromptSet::defaults().ltm_probe;
    auto ok = mock({"Here you go: " + example.substr(example.find('{'))});
    LtmProber prober(ok);
    const auto outcome = prober.probe("img.jpg");
    ASSERT_TRUE(std::holds_alternative<LtmPrediction>(outcome));
    const auto req = ok->requests().at(0);
    ASSERT_EQ(req.messages.size(), 1u);
    EXPECT_EQ(req.messages[0].image_ref, "img.jpg");
    EXPECT_EQ(req.messages[0].text, example);

    auto filtered = std::make_shared<MockChatClient>(std::vector<MockChatClient::Step>{filtered_step()});
    EXPECT_TRUE(std::holds_alternative<Refusal>(LtmProber(filtered).probe("x")));

    auto broken = mock({"{broken", "still not json"});
    EXPECT_THROW(LtmProber(broken).probe("x"), LtmParseError);
    EXPECT_EQ(broken->call_count(), 2u);
}

TEST(Ltm, GeolocationSummary) {
    const std::vector<GeoCoordinate> truths = {{0, 0}, {10, 10}, {20, 20}, {-30, 40}};
    std::vector<ProbeOutcome> exact;
    for (const auto& t : truths) exact.push_back(LtmPrediction{"", "", "", "", "", t});
    const auto perfect = evaluate_geolocation(exact, truths);
    for (const auto& f : perfect.fractions) EXPECT_EQ(f.fraction, 1.0);
    EXPECT_EQ(perfect.median, 0.0);

    const std::vector<ProbeOutcome> refusals(4, Refusal{"content-filter"});
    const auto none = evaluate_geolocation(refusals, truths);
    for (const auto& f : none.fractions) EXPECT_EQ(f.fraction, 0.0);
    EXPECT_TRUE(std::isinf(*none.median));
    EXPECT_EQ(none.refusals, 4u);

    // Mixed: offsets of roughly 0.5, 100 and 1000 km plus one refusal.
    std::vector<ProbeOutcome> mixed = {LtmPrediction{"", "", "", "", "", {0.0045, 0}},
                                       LtmPrediction{"", "", "", "", "", {10.9, 10}},
                                       LtmPrediction{"", "", "", "", "", {29, 20}}, Refusal{"content-filter"}};
    const auto s = evaluate_geolocation(mixed, truths);
    std::vector<double> recount;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& p = std::get<LtmPrediction>(mixed[i]).coordinate;
        recount.push_back(oracle::distance_km(p.latitude(), p.longitude(), truths[i].latitude(), truths[i].longitude()));
    }
    recount.push_back(INFINITY);
    const auto& th = default_geolocation_thresholds();
    for (std::size_t k = 0; k < th.size(); ++k) {
        EXPECT_DOUBLE_EQ(s.fractions[k].fraction, oracle::fraction_within(recount, th[k])) << th[k];
    }
    EXPECT_NEAR(*s.median, (recount[1] + recount[2]) / 2, 1e-6);
    EXPECT_THROW(evaluate_geolocation(mixed, std::span(truths).first(2)), LengthMismatch);
    EXPECT_FALSE(median_km({}).has_value());
    EXPECT_TRUE(std::isinf(*median_km({1, INFINITY})));
}

// ---------------------------------------------------------------- synthesis

namespace {

std::string belief(const std::string& country, const std::string& city, const std::string& question) {
    return Json{{"guess",
                 {{"country", country},
                  {"city", city},
                  {"neighborhood", ""},
                  {"exact", {{"exact_location_name", ""}, {"latitude", ""}, {"longitude", ""}}}}},
                {"question", question}}
        .dump();
}

std::string extraction(const std::string& country, const std::string& city, const std::string& lat = "",
                       const std::string& lon = "") {
    return Json{{"country", country}, {"city", city}, {"neighborhood", ""}, {"exact_location_name", ""},
                {"latitude", lat},    {"longitude", lon}}
        .dump();
}

ImageRecord trenton() {
    return image_record_from_json(Json::parse(R"({"id": "img1", "image_ref": "photos/field.jpg",
        "title": "Little league field", "tags": ["baseball", "park"], "latitude": 40.2206, "longitude": -74.7597,
        "address": "Arm and Hammer Park, Trenton, NJ", "country": "United States", "city": "Trenton"})"),
                                  1);
}

SynthesisClients scripted_reveal() {
    return {mock({belief("", "", "Which country is this?"), belief("United States", "", "Which city?"),
                  belief("United States", "Trenton", "What are the coordinates?")}),
            mock({"This looks like the United States.", "I believe this is Trenton.", "It is at 40.2206, -74.7597."}),
            mock({extraction("United States", ""), extraction("", "Trenton"), extraction("", "", "40.2206", "-74.7597")})};
}

}  // namespace

TEST(Synthesis, ParsesDocumentedBelief) {
    const auto b = parse_belief(PromptSet::defaults().belief_update);
    ASSERT_TRUE(b);
    EXPECT_EQ(b->guess.country, "United States");
    EXPECT_EQ(b->guess.city, "Trenton");
    EXPECT_TRUE(b->guess.neighborhood.empty());
    EXPECT_FALSE(b->guess.coordinate);
    EXPECT_EQ(b->question, "What neighborhood in Trenton has the distinctive baseball field shown in the image?");
    EXPECT_FALSE(parse_belief("prose only"));
    EXPECT_FALSE(parse_belief(R"({"guess": {}})"));
}

TEST(Synthesis, ImageRecords) {
    const auto r = trenton();
    EXPECT_EQ(r.context.tags, "baseball, park");
    EXPECT_EQ(r.ground_truth.city, "Trenton");
    EXPECT_THROW(image_record_from_json(Json::parse(R"({"image_ref": "x", "title": "t", "tags": "a",
        "address": "", "latitude": 1})"), 3),
                 MissingRequiredField);
    EXPECT_THROW(image_record_from_json(Json::parse(R"({"image_ref": "x", "title": "t", "tags": "a",
        "address": "", "latitude": 91, "longitude": 0})"), 3),
                 MalformedRecord);
}

TEST(Synthesis, ThreeTurnRevealEndingInCoordinates) {
    DialogueSynthesizer synth(scripted_reveal());
    const auto c = synth.synthesize(trenton());
    ASSERT_EQ(c.turns.size(), 3u);
    EXPECT_EQ(c.turns[1].response, "I believe this is Trenton.");
    EXPECT_EQ(c.turns[0].annotation->country, "United States");
    EXPECT_EQ(c.turns[1].annotation->country, "United States");
    EXPECT_EQ(c.turns[1].annotation->city, "Trenton");
    ASSERT_TRUE(c.turns[2].annotation->coordinate);
    EXPECT_EQ(*c.turns[2].annotation->coordinate, GeoCoordinate(40.2206, -74.7597));
    // Cumulative annotations never lose a field.
    for (std::size_t t = 1; t < c.turns.size(); ++t) {
        for (auto g : kAllGranularities) {
            if (c.turns[t - 1].annotation->has(g)) EXPECT_TRUE(c.turns[t].annotation->has(g));
        }
    }
    EXPECT_EQ(c.turns[1].extra["belief"]["country"], "United States");
}

TEST(Synthesis, ByteDeterministic) {
    std::string first;
    for (int run = 0; run < 2; ++run) {
        DialogueSynthesizer synth(scripted_reveal());
        const std::string line = dump_line(conversation_to_json(synth.synthesize(trenton())));
        if (run == 0) first = line;
        else EXPECT_EQ(line, first);
    }
}

TEST(Synthesis, TurnCapAndStopRules) {
    DialogueSynthesizer capped({mock({belief("United States", "", "Where?")}, true),
                                mock({"Somewhere in the United States."}, true),
                                mock({extraction("United States", "")}, true)});
    EXPECT_EQ(capped.synthesize(trenton()).turns.size(), static_cast<std::size_t>(kDefaultMaxQuestions));

    DialogueSynthesizer second_empty({mock({belief("", "", "Which country?"), belief("United States", "", "")}),
                                      mock({"The United States."}), mock({extraction("United States", "")})});
    EXPECT_EQ(second_empty.synthesize(trenton()).turns.size(), 1u);

    DialogueSynthesizer first_empty({mock({belief("", "", "  ")}), mock({}), mock({})});
    EXPECT_TRUE(first_empty.synthesize(trenton()).turns.empty());
}

TEST(Synthesis, QuerierProseAborts) {
    auto querier = mock({belief("", "", "Which country?"), "no json", "still none"});
    DialogueSynthesizer synth({querier, mock({"The United States."}), mock({extraction("United States", "")})});
    try {
        synth.synthesize(trenton());
        FAIL() << "expected SynthesisParseError";
    } catch (const SynthesisParseError& e) {
        EXPECT_EQ(e.partial().turns.size(), 1u);
    }
    EXPECT_EQ(querier->call_count(), 3u);
}

TEST(Synthesis, FilteredAnswerBecomesRefusal) {
    auto answerer = std::make_shared<MockChatClient>(std::vector<MockChatClient::Step>{
        {ChatResponse{"The United States.", FinishReason::Complete}}, filtered_step()});
    DialogueSynthesizer synth({mock({belief("", "", "Which country?"), belief("United States", "", "Which city?"),
                                     belief("United States", "", "")}),
                               answerer, mock({extraction("United States", "")})});
    const auto c = synth.synthesize(trenton());
    ASSERT_EQ(c.turns.size(), 2u);
    EXPECT_EQ(c.turns[1].response, kRefusalMarker);
    EXPECT_EQ(c.turns[1].extra["refused"], true);
    EXPECT_TRUE(annotation_delta(*c.turns[0].annotation, *c.turns[1].annotation).empty());
}

TEST(Synthesis, Extractor) {
    auto ex = mock({extraction("Ireland", "Dublin"), extraction("", ""), extraction("", "", "53.3438", "-6.2546"),
                    extraction("", "", "95", "0")});
    DialogueSynthesizer synth({mock({}), mock({}), ex});
    const auto a = synth.extract_revealed_location("This is Dublin, Ireland.");
    EXPECT_EQ(a.revealed.country, "Ireland");
    EXPECT_EQ(a.revealed.city, "Dublin");
    EXPECT_FALSE(a.warning);
    EXPECT_TRUE(synth.extract_revealed_location("A sunny day.").revealed.empty());
    const auto c = synth.extract_revealed_location("At 53.3438, -6.2546.");
    EXPECT_EQ(*c.revealed.coordinate, GeoCoordinate(53.3438, -6.2546));
    const auto bad = synth.extract_revealed_location("At 95, 0.");
    EXPECT_FALSE(bad.revealed.coordinate);
    EXPECT_TRUE(bad.warning);
    // Text-only: the extractor never sees the image.
    for (const auto& r : ex->requests()) EXPECT_FALSE(r.messages[0].image_ref);
    EXPECT_NE(ex->requests()[0].messages[0].text.find("Response: This is Dublin, Ireland."), std::string::npos);

    auto garbage = mock({"nope", "nope"});
    DialogueSynthesizer g({mock({}), mock({}), garbage});
    const auto w = g.extract_revealed_location("Dublin");
    EXPECT_TRUE(w.revealed.empty());
    EXPECT_TRUE(w.warning);
}

TEST(Synthesis, RequestShapes) {
    DialogueSynthesizer synth(scripted_reveal());
    const std::vector<Turn> history = {Turn{1, "Which country?", "The United States.", std::nullopt, {}}};
    const auto q = synth.query_request("img.jpg", history);
    ASSERT_EQ(q.messages.size(), 1u);
    EXPECT_EQ(q.messages[0].image_ref, "img.jpg");
    EXPECT_NE(q.messages[0].text.find("Question 1: Which country?\nAnswer 1: The United States."), std::string::npos);
    EXPECT_NE(synth.query_request("img.jpg", {}).messages[0].text.find("No questions have been asked yet."),
              std::string::npos);

    const auto a = synth.answer_request("img.jpg", history, "Which city?", trenton().context);
    a.validate();
    ASSERT_EQ(a.messages.size(), 3u);
    EXPECT_EQ(a.messages[0].image_ref, "img.jpg");
    const auto& last = a.messages[2].text;
    EXPECT_TRUE(last.starts_with("Which city?\n\n"));
    EXPECT_NE(last.find("Latitude: 40.2206"), std::string::npos);
    EXPECT_NE(last.find("Longitude: -74.7597"), std::string::npos);
    EXPECT_NE(last.find("Image Tags: baseball, park"), std::string::npos);
    EXPECT_NE(last.find("Address: Arm and Hammer Park, Trenton, NJ"), std::string::npos);
}
