#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>

#include "geomod/coordinates.hpp"
#include "geomod/dialogue.hpp"
#include "geomod/json_extract.hpp"
#include "geomod/prompts.hpp"
#include "geomod/vlm_client.hpp"

namespace geomod {

struct ModerationInput {
    Granularity granularity = Granularity::Country;
    std::string image_ref;
    // The conversation truncated at the response under moderation, inclusive.
    std::span<const Turn> dialogue;
    std::string conversation_id;

    const Turn& message() const { return dialogue.back(); }
    std::span<const Turn> history() const { return dialogue.first(dialogue.size() - 1); }
};

struct ModerationDecision {
    bool flag = false;
    std::string rationale;
    std::string agent_id;

    bool operator==(const ModerationDecision&) const = default;
};

inline constexpr std::string_view kUnparseableRationale = "unparseable-moderator-output";

// Maps (granularity, image, truncated dialogue) to flag / no flag. Agents
// never modify the dialogue and may be called from several threads.
class ModerationAgent {
public:
    virtual ~ModerationAgent() = default;
    virtual ModerationDecision moderate(const ModerationInput& input) = 0;
    virtual std::string id() const = 0;
};

class ConstantAgent final : public ModerationAgent {
public:
    explicit ConstantAgent(bool flag) : flag_(flag) {}
    ModerationDecision moderate(const ModerationInput&) override { return {flag_, {}, id()}; }
    std::string id() const override { return flag_ ? "flag-all" : "flag-none"; }

private:
    bool flag_;
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Fair coin per message. The stream for each conversation is seeded with
// seed ^ hash(conversation id), and each (turn, granularity) draws from its
// own position, so decisions do not depend on call order.
class RandomAgent final : public ModerationAgent {
public:
    explicit RandomAgent(std::uint64_t seed) : seed_(seed) {}

    ModerationDecision moderate(const ModerationInput& input) override {
        const std::uint64_t conversation_seed = seed_ ^ fnv1a64(input.conversation_id);
        const std::uint64_t position = (static_cast<std::uint64_t>(input.dialogue.size()) << 8) |
                                       static_cast<std::uint64_t>(rank(input.granularity));
        std::mt19937_64 engine(splitmix64(conversation_seed ^ splitmix64(position)));
        std::bernoulli_distribution coin(0.5);
        return {coin(engine), {}, id()};
    }

    std::string id() const override { return "random"; }

private:
    std::uint64_t seed_;
};

// Flags responses that state coordinates not given in an earlier response.
// The rule does not depend on the configured granularity.
class RegexAgent final : public ModerationAgent {
public:
    ModerationDecision moderate(const ModerationInput& input) override {
        return {regex_baseline_flag(input.history(), input.message().response), {}, id()};
    }
    std::string id() const override { return "regex"; }
};

// Replays gold labels from the cumulative annotations in the dialogue.
class OracleAgent final : public ModerationAgent {
public:
    ModerationDecision moderate(const ModerationInput& input) override {
        const auto& curr = require_annotation(input.message(), input.conversation_id);
        const LocationAnnotation prev = input.dialogue.size() >= 2
                                            ? require_annotation(input.dialogue[input.dialogue.size() - 2],
                                                                 input.conversation_id)
                                            : LocationAnnotation{};
        return {annotation_delta(prev, curr).any_at_least(input.granularity), {}, id()};
    }
    std::string id() const override { return "oracle"; }
};

// Prompted vision-language moderator. The history is replayed as
// alternating messages with the image on the first user message; the
// response under moderation goes in the final user message.
class PromptedVlmAgent final : public ModerationAgent {
public:
    PromptedVlmAgent(std::shared_ptr<ChatClient> client, std::string model,
                     PromptSet prompts = PromptSet::defaults(), int parse_attempts = 2)
        : client_(std::move(client)), model_(std::move(model)), prompts_(std::move(prompts)),
          parse_attempts_(parse_attempts) {}

    ChatRequest build_request(const ModerationInput& input) const {
        ChatRequest req;
        req.system_prompt = render_template(
            prompts_.moderator, {{"granularity", granularity_phrase(input.granularity)},
                                 {"example", prompts_.moderator_example(input.granularity)}});
        const auto history = input.history();
        for (std::size_t i = 0; i < history.size(); ++i) {
            ChatMessage q{Role::User, history[i].question, std::nullopt};
            if (i == 0) q.image_ref = input.image_ref;
            req.messages.push_back(std::move(q));
            req.messages.push_back(ChatMessage{Role::Assistant, history[i].response, std::nullopt});
        }
        ChatMessage last{Role::User,
                         "Question: " + input.message().question + "\nAnswer: " + input.message().response,
                         std::nullopt};
        if (history.empty()) last.image_ref = input.image_ref;
        req.messages.push_back(std::move(last));
        if (!model_.empty()) req.model = model_;
        return req;
    }

    ModerationDecision moderate(const ModerationInput& input) override {
        const ChatRequest req = build_request(input);
        for (int attempt = 0; attempt < parse_attempts_; ++attempt) {
            const ChatResponse resp = client_->complete(req);
            if (resp.finish_reason == FinishReason::Filtered) continue;
            if (auto decision = parse(resp.text)) return *decision;
        }
        return {true, std::string(kUnparseableRationale), id()};
    }

    std::string id() const override { return "vlm:" + model_; }

    // {"rationale": ..., "answer": "Yes"|"No"}; anything else is unparseable.
    std::optional<ModerationDecision> parse(std::string_view text) const {
        Json obj;
        try {
            obj = extract_first_json_object(text);
        } catch (const DataError&) {
            return std::nullopt;
        }
        const auto answer_it = obj.find("answer");
        if (answer_it == obj.end() || !answer_it->is_string()) return std::nullopt;
        const std::string answer = ascii_lower(trim_ascii(answer_it->get<std::string>()));
        if (answer != "yes" && answer != "no") return std::nullopt;
        std::string rationale;
        if (const auto r = obj.find("rationale"); r != obj.end() && r->is_string()) {
            rationale = r->get<std::string>();
        }
        if (trim_ascii(rationale).empty()) rationale = "no rationale given";
        return ModerationDecision{answer == "yes", std::move(rationale), id()};
    }

private:
    std::shared_ptr<ChatClient> client_;
    std::string model_;
    PromptSet prompts_;
    int parse_attempts_;
};

struct AgentContext {
    std::uint64_t seed = 0;
    PromptSet prompts = PromptSet::defaults();
    // Chat client for a "vlm:<model>" agent.
    std::function<std::shared_ptr<ChatClient>(const std::string& model)> chat_client;
};

// "random", "regex", "oracle", "flag-all", "flag-none", "vlm:<model>".
inline std::unique_ptr<ModerationAgent> make_agent(std::string_view spec, const AgentContext& ctx) {
    if (spec == "random") return std::make_unique<RandomAgent>(ctx.seed);
    if (spec == "regex") return std::make_unique<RegexAgent>();
    if (spec == "oracle") return std::make_unique<OracleAgent>();
    if (spec == "flag-all") return std::make_unique<ConstantAgent>(true);
    if (spec == "flag-none") return std::make_unique<ConstantAgent>(false);
    if (spec.starts_with("vlm:")) {
        const std::string model(spec.substr(4));
        if (!ctx.chat_client) throw InvalidConfig("no chat client configured for agent " + std::string(spec));
        return std::make_unique<PromptedVlmAgent>(ctx.chat_client(model), model, ctx.prompts);
    }
    throw InvalidConfig("unknown agent: " + std::string(spec));
}

}  // namespace geomod
