#pragma once

#include <cctype>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>

#include "geomod/dialogue.hpp"
#include "geomod/error.hpp"

namespace geomod {

enum class Role { User, Assistant };

struct ChatMessage {
    Role role = Role::User;
    std::string text;
    // Path, http(s) URL, or data: URL.
    std::optional<std::string> image_ref;
};

inline constexpr double kDefaultTemperature = 0.7;
inline constexpr double kDefaultTopP = 0.95;
inline constexpr int kDefaultMaxTokens = 1024;

struct ChatRequest {
    std::string system_prompt;
    std::vector<ChatMessage> messages;
    double temperature = kDefaultTemperature;
    double top_p = kDefaultTopP;
    int max_tokens = kDefaultMaxTokens;
    // Overrides the client's configured model for this call.
    std::optional<std::string> model;

    // Roles alternate starting with the user; at most one image.
    void validate() const {
        if (messages.empty()) throw DataError("chat request has no messages");
        int images = 0;
        for (std::size_t i = 0; i < messages.size(); ++i) {
            const Role expected = (i % 2 == 0) ? Role::User : Role::Assistant;
            if (messages[i].role != expected) {
                throw DataError("chat request roles must alternate starting with user");
            }
            if (messages[i].image_ref) ++images;
        }
        if (images > 1) throw DataError("chat request carries more than one image");
    }
};

enum class FinishReason { Complete, Filtered, Length, Error };

constexpr std::string_view to_string(FinishReason r) noexcept {
    switch (r) {
        case FinishReason::Complete: return "complete";
        case FinishReason::Filtered: return "filtered";
        case FinishReason::Length: return "length";
        case FinishReason::Error: return "error";
    }
    return "error";
}

inline std::optional<FinishReason> parse_finish_reason(std::string_view s) noexcept {
    for (auto r : {FinishReason::Complete, FinishReason::Filtered, FinishReason::Length,
                   FinishReason::Error}) {
        if (to_string(r) == s) return r;
    }
    return std::nullopt;
}

struct ChatResponse {
    std::string text;
    FinishReason finish_reason = FinishReason::Complete;

    static ChatResponse filtered() { return {"", FinishReason::Filtered}; }

    bool operator==(const ChatResponse&) const = default;
};

class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
};

// Replays a fixed script. Fully deterministic; records every request.
class MockChatClient final : public ChatClient {
public:
    struct Step {
        ChatResponse response;
        // Simulates a transport failure instead of replying.
        bool transport_error = false;
    };

    explicit MockChatClient(std::vector<Step> script, bool repeat_last = false)
        : script_(script.begin(), script.end()), repeat_last_(repeat_last) {}

    static MockChatClient canned(std::string text) {
        return MockChatClient({Step{ChatResponse{std::move(text), FinishReason::Complete}}}, true);
    }

    static MockChatClient scripted(const std::vector<std::string>& replies) {
        std::vector<Step> steps;
        for (const auto& r : replies) steps.push_back(Step{ChatResponse{r, FinishReason::Complete}});
        return MockChatClient(std::move(steps));
    }

    MockChatClient(MockChatClient&& other) noexcept
        : script_(std::move(other.script_)), repeat_last_(other.repeat_last_),
          last_(std::move(other.last_)), requests_(std::move(other.requests_)) {}

    ChatResponse complete(const ChatRequest& request) override {
        request.validate();
        std::lock_guard lock(mutex_);
        requests_.push_back(request);
        Step step;
        if (!script_.empty()) {
            step = std::move(script_.front());
            script_.pop_front();
            last_ = step;
        } else if (repeat_last_ && last_) {
            step = *last_;
        } else {
            throw TransportError("mock chat script exhausted");
        }
        if (step.transport_error) throw TransportError("mock transport failure");
        return step.response;
    }

    std::vector<ChatRequest> requests() const {
        std::lock_guard lock(mutex_);
        return requests_;
    }

    std::size_t call_count() const {
        std::lock_guard lock(mutex_);
        return requests_.size();
    }

private:
    mutable std::mutex mutex_;
    std::deque<Step> script_;
    bool repeat_last_;
    std::optional<Step> last_;
    std::vector<ChatRequest> requests_;
};

// Script files: a JSON array of steps, or an object mapping channel names
// ("moderator", "querier", "answerer", "extractor", "upstream", ...) to
// arrays. A step is a reply string or {"text", "finish_reason"} or
// {"error": "transport"}.
class MockScript {
public:
    static MockScript load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open mock script: " + path.string());
        Json j;
        try {
            j = Json::parse(in);
        } catch (const Json::parse_error& e) {
            throw DataError("mock script " + path.string() + ": " + e.what());
        }
        return from_json(j);
    }

    static MockScript from_json(const Json& j) {
        MockScript s;
        if (j.is_array()) {
            s.channels_[""] = parse_steps(j);
        } else if (j.is_object()) {
            for (const auto& [name, steps] : j.items()) s.channels_[name] = parse_steps(steps);
        } else {
            throw DataError("mock script must be an array or an object of arrays");
        }
        return s;
    }

    bool has(const std::string& channel) const { return channels_.count(channel) != 0; }

    // The named channel, else the unnamed default sequence. Each call
    // returns an independent client over a fresh copy of the steps.
    std::unique_ptr<MockChatClient> client(const std::string& channel, bool repeat_last = false) const {
        auto it = channels_.find(channel);
        if (it == channels_.end()) it = channels_.find("");
        if (it == channels_.end()) throw DataError("mock script has no channel '" + channel + "'");
        return std::make_unique<MockChatClient>(it->second, repeat_last);
    }

private:
    static std::vector<MockChatClient::Step> parse_steps(const Json& arr) {
        if (!arr.is_array()) throw DataError("mock script channel must be an array");
        std::vector<MockChatClient::Step> out;
        for (const auto& e : arr) {
            MockChatClient::Step step;
            if (e.is_string()) {
                step.response.text = e.get<std::string>();
            } else if (e.is_object()) {
                if (e.value("error", "") == "transport") {
                    step.transport_error = true;
                } else {
                    step.response.text = e.value("text", "");
                    const auto reason = parse_finish_reason(e.value("finish_reason", "complete"));
                    if (!reason) throw DataError("mock script: unknown finish_reason");
                    step.response.finish_reason = *reason;
                    if (step.response.finish_reason == FinishReason::Filtered) step.response.text.clear();
                }
            } else {
                throw DataError("mock script step must be a string or object");
            }
            out.push_back(std::move(step));
        }
        return out;
    }

    std::map<std::string, std::vector<MockChatClient::Step>> channels_;
};

// Transient failures are retried max_retries times; the delay before retry
// i (0-based) is initial_backoff * multiplier^i.
struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{1000};
    double multiplier = 2.0;
    std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
        std::this_thread::sleep_for(d);
    };

    std::chrono::milliseconds delay(int retry) const {
        double ms = static_cast<double>(initial_backoff.count());
        for (int i = 0; i < retry; ++i) ms *= multiplier;
        return std::chrono::milliseconds(static_cast<long long>(ms));
    }
};

struct EndpointConfig {
    std::string api_base;  // e.g. https://api.openai.com/v1
    std::string api_key;
    std::string model;
    std::chrono::seconds connect_timeout{10};
    std::chrono::seconds read_timeout{180};

    // VLM_API_BASE, VLM_API_KEY, VLM_MODEL.
    static EndpointConfig from_env() {
        auto env = [](const char* name) {
            const char* v = std::getenv(name);
            return v ? std::string(v) : std::string();
        };
        EndpointConfig c;
        c.api_base = env("VLM_API_BASE");
        c.api_key = env("VLM_API_KEY");
        c.model = env("VLM_MODEL");
        return c;
    }
};

namespace http_detail {

struct SplitUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;    // base path without trailing slash
};

inline SplitUrl split_url(std::string_view url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string_view::npos) throw InvalidConfig("URL lacks a scheme: " + std::string(url));
    const auto path_start = url.find('/', scheme_end + 3);
    SplitUrl out;
    if (path_start == std::string_view::npos) {
        out.origin = std::string(url);
    } else {
        out.origin = std::string(url.substr(0, path_start));
        out.path = std::string(url.substr(path_start));
    }
    while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
    return out;
}

inline bool is_transient_status(int status) {
    return status == 408 || status == 429 || status >= 500;
}

inline std::string mime_for(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".png") return "image/png";
    if (ext == ".gif") return "image/gif";
    if (ext == ".webp") return "image/webp";
    return "image/jpeg";
}

}  // namespace http_detail

// URL form of an image reference: URLs pass through, files become data: URLs.
inline std::string image_url_for(const std::string& image_ref) {
    if (image_ref.starts_with("http://") || image_ref.starts_with("https://") ||
        image_ref.starts_with("data:")) {
        return image_ref;
    }
    std::ifstream in(image_ref, std::ios::binary);
    if (!in) throw DataError("cannot read image: " + image_ref);
    std::ostringstream buf;
    buf << in.rdbuf();
    return "data:" + http_detail::mime_for(image_ref) + ";base64," +
           httplib::detail::base64_encode(buf.str());
}

using ImageResolver = std::function<std::string(const std::string&)>;

// OpenAI-compatible chat-completions request body.
inline Json openai_request_body(const ChatRequest& request, const std::string& model,
                                const ImageResolver& resolve_image = image_url_for) {
    Json messages = Json::array();
    if (!request.system_prompt.empty()) {
        messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
    }
    for (const auto& m : request.messages) {
        Json msg = Json::object();
        msg["role"] = m.role == Role::User ? "user" : "assistant";
        if (m.image_ref) {
            Json parts = Json::array();
            parts.push_back({{"type", "text"}, {"text", m.text}});
            parts.push_back({{"type", "image_url"}, {"image_url", {{"url", resolve_image(*m.image_ref)}}}});
            msg["content"] = std::move(parts);
        } else {
            msg["content"] = m.text;
        }
        messages.push_back(std::move(msg));
    }
    Json body = Json::object();
    body["model"] = request.model.value_or(model);
    body["messages"] = std::move(messages);
    body["temperature"] = request.temperature;
    body["top_p"] = request.top_p;
    body["max_tokens"] = request.max_tokens;
    return body;
}

inline ChatResponse parse_openai_response(const std::string& body) {
    const Json j = Json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
        throw TransportError("malformed chat-completions response");
    }
    const Json& choice = j["choices"][0];
    const std::string reason = choice.value("finish_reason", std::string("stop"));
    if (reason == "content_filter") return ChatResponse::filtered();
    std::string text;
    if (choice.contains("message") && choice["message"].contains("content")) {
        const Json& content = choice["message"]["content"];
        if (content.is_string()) {
            text = content.get<std::string>();
        } else if (content.is_array()) {
            for (const auto& part : content) {
                if (part.is_object() && part.value("type", "") == "text") text += part.value("text", "");
            }
        }
    }
    return ChatResponse{std::move(text), reason == "length" ? FinishReason::Length : FinishReason::Complete};
}

class OpenAiChatClient final : public ChatClient {
public:
    explicit OpenAiChatClient(EndpointConfig config, RetryPolicy retry = {})
        : config_(std::move(config)), retry_(std::move(retry)),
          url_(http_detail::split_url(config_.api_base)) {
        if (config_.api_base.empty()) throw InvalidConfig("VLM API base URL is not configured");
    }

    ChatResponse complete(const ChatRequest& request) override {
        request.validate();
        const std::string body = openai_request_body(request, config_.model).dump();
        httplib::Headers headers;
        if (!config_.api_key.empty()) {
            headers.emplace("Authorization", "Bearer " + config_.api_key);
            headers.emplace("api-key", config_.api_key);
        }
        const std::string path = url_.path + "/chat/completions";
        std::string last_error;
        for (int attempt = 0;; ++attempt) {
            httplib::Client cli(url_.origin);
            cli.set_connection_timeout(config_.connect_timeout);
            cli.set_read_timeout(config_.read_timeout);
            auto res = cli.Post(path, headers, body, "application/json");
            if (res) {
                const int status = res->status;
                if (status == 200) return parse_openai_response(res->body);
                if (status == 401 || status == 403) {
                    throw AuthError("chat endpoint rejected credentials (HTTP " + std::to_string(status) + ")");
                }
                if (status == 400 && res->body.find("content_filter") != std::string::npos) {
                    return ChatResponse::filtered();
                }
                last_error = "HTTP " + std::to_string(status);
                if (!http_detail::is_transient_status(status)) {
                    throw TransportError("chat endpoint returned " + last_error + ": " + res->body);
                }
            } else {
                last_error = httplib::to_string(res.error());
            }
            if (attempt >= retry_.max_retries) break;
            retry_.sleep(retry_.delay(attempt));
        }
        throw TransportError("chat endpoint unavailable after " + std::to_string(retry_.max_retries + 1) +
                             " attempts: " + last_error);
    }

private:
    EndpointConfig config_;
    RetryPolicy retry_;
    http_detail::SplitUrl url_;
};

}  // namespace geomod
