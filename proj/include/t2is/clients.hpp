#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "t2is/image_io.hpp"

namespace t2is {

struct ChatMessage {
    std::string role;  // "system", "user" or "assistant"
    std::string text;
    std::vector<Rgb8> images;  // sent as base64 PNG data URLs; user messages only
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    std::size_t max_tokens = 512;
    bool logprobs = false;
    std::size_t top_logprobs = 0;  // must be >= 5 when logprobs is set

    // Throws ValidationError.
    void validate() const;
};

struct TokenLogprob {
    std::string token;
    double logprob = 0.0;
};

struct ChatResponse {
    std::string text;
    // First generated token's top-k candidates, when the server returned them.
    std::optional<std::vector<TokenLogprob>> top_logprobs;
};

inline constexpr std::size_t kMinTopLogprobs = 5;

// Chat-completions body. Images become {"type":"image_url"} parts holding
// data:image/png;base64 URLs.
nlohmann::json request_to_json(const ChatRequest& request);
// Parses choices[0].message.content and choices[0].logprobs.content[0].top_logprobs.
ChatResponse response_from_json(const nlohmann::json& body);

// Same JSON as request_to_json except every image is replaced by
// "rgb8:<w>x<h>:<fnv1a of the pixels>", so keys do not depend on the PNG encoder.
nlohmann::json canonical_request(const ChatRequest& request);
// 16 hex digits of FNV-1a over canonical_request(...).dump().
std::string request_key(const ChatRequest& request);

nlohmann::json response_to_json(const ChatResponse& response);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual ChatResponse chat(const ChatRequest& request) = 0;
};

// ---- HTTP --------------------------------------------------------------

struct HttpReply {
    int status = 0;  // 0: connection failure or timeout
    std::string body;
    std::string error;
};

class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpReply post(const std::string& path, const std::string& body,
                           const std::map<std::string, std::string>& headers) = 0;
};

struct EndpointConfig {
    std::string base_url;  // e.g. http://localhost:8000/v1
    std::string api_key;
    std::string model;
    std::chrono::milliseconds timeout{60000};
    std::size_t max_retries = 2;
    std::chrono::milliseconds backoff{500};  // doubled after every retry
    std::size_t max_in_flight = 4;

    // T2IS_ENDPOINT, T2IS_API_KEY, T2IS_MODEL. Throws ValidationError when
    // T2IS_ENDPOINT is unset.
    static EndpointConfig from_env();
};

struct UrlParts {
    std::string scheme_host_port;  // "http://host:port"
    std::string path_prefix;       // "/v1", or empty
};
UrlParts split_url(const std::string& url);

// Real network transport (cpp-httplib). Every post() bumps http_attempt_count().
std::unique_ptr<Transport> make_http_transport(const EndpointConfig& config);
std::uint64_t http_attempt_count();

class HttpChatClient : public ChatClient {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit HttpChatClient(EndpointConfig config);
    HttpChatClient(EndpointConfig config, std::unique_ptr<Transport> transport, Sleeper sleeper = {});

    // Up to 1 + max_retries attempts; retries on status 0, 408, 429 and 5xx.
    // Other 4xx throw a permanent ExternalServiceError right away.
    ChatResponse chat(const ChatRequest& request) override;

    std::size_t peak_in_flight() const;

private:
    EndpointConfig config_;
    std::unique_ptr<Transport> transport_;
    Sleeper sleep_;
    std::string path_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::size_t in_flight_ = 0;
    std::size_t peak_ = 0;
};

// ---- offline clients -----------------------------------------------------

// Responses looked up in JSON transcripts:
//
//   {"version": 1, "entries": [
//      {"key": "<request_key>", "response": {...}},
//      {"match": "<substring of the last user message>", "response": {...}}]}
//
// Keyed entries win; otherwise the first "match" entry (file order) whose
// substring occurs in the last user message. A request with no entry throws a
// non-retryable ExternalServiceError.
class FixtureClient : public ChatClient {
public:
    FixtureClient() = default;
    void load_file(const std::string& path);
    // Every *.json file in the directory, in name order.
    void load_directory(const std::string& dir);

    void add_transcript(const nlohmann::json& transcript);
    void add_keyed(const std::string& key, ChatResponse response);
    void add_match(const std::string& needle, ChatResponse response);

    ChatResponse chat(const ChatRequest& request) override;
    std::size_t calls() const;

private:
    std::map<std::string, ChatResponse> keyed_;
    std::vector<std::pair<std::string, ChatResponse>> matches_;
    mutable std::mutex mu_;
    std::size_t calls_ = 0;
};

class FunctionClient : public ChatClient {
public:
    using Fn = std::function<ChatResponse(const ChatRequest&)>;
    explicit FunctionClient(Fn fn) : fn_(std::move(fn)) {}
    ChatResponse chat(const ChatRequest& request) override { return fn_(request); }

private:
    Fn fn_;
};

// Forwards to another client and keeps a keyed transcript of every exchange.
class RecordingClient : public ChatClient {
public:
    explicit RecordingClient(ChatClient& inner) : inner_(inner) {}
    ChatResponse chat(const ChatRequest& request) override;
    nlohmann::json transcript() const;

private:
    ChatClient& inner_;
    mutable std::mutex mu_;
    nlohmann::json entries_ = nlohmann::json::array();
};

// ---- Yes/No scoring ------------------------------------------------------

// Surface forms matched exactly against the first-token candidates.
inline const std::vector<std::string>& yes_forms() {
    static const std::vector<std::string> f{"Yes", "yes", " Yes"};
    return f;
}
inline const std::vector<std::string>& no_forms() {
    static const std::vector<std::string> f{"No", "no", " No"};
    return f;
}

// Two-way softmax over the best Yes and best No logprob. Swapping the two
// logprobs gives exactly 1 − p. Throws CapabilityError without logprobs,
// ScoringError when either side is missing.
double yes_probability(const ChatResponse& response);
double yes_probability(double yes_logprob, double no_logprob);

// Builds the Yes/No question request used by the scorers.
ChatRequest yes_no_request(const std::string& model, const std::string& question, std::vector<Rgb8> images);

}  // namespace t2is
