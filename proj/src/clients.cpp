#include "t2is/clients.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#ifdef T2IS_WITH_HTTPS
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include "t2is/error.hpp"

namespace t2is {

namespace {

using nlohmann::json;

std::atomic<std::uint64_t> g_http_attempts{0};

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json message_json(const ChatMessage& m, const std::function<std::string(const Rgb8&)>& image_url) {
    if (m.images.empty()) return json{{"role", m.role}, {"content", m.text}};
    json parts = json::array();
    parts.push_back({{"type", "text"}, {"text", m.text}});
    for (const auto& img : m.images) parts.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url(img)}}}});
    return json{{"role", m.role}, {"content", parts}};
}

json body_json(const ChatRequest& r, const std::function<std::string(const Rgb8&)>& image_url) {
    r.validate();
    json j;
    j["model"] = r.model;
    j["messages"] = json::array();
    for (const auto& m : r.messages) j["messages"].push_back(message_json(m, image_url));
    j["max_tokens"] = r.max_tokens;
    j["temperature"] = 0;
    if (r.logprobs) {
        j["logprobs"] = true;
        j["top_logprobs"] = r.top_logprobs;
    }
    return j;
}

bool retryable_status(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

std::string last_user_text(const ChatRequest& r) {
    for (auto it = r.messages.rbegin(); it != r.messages.rend(); ++it)
        if (it->role == "user") return it->text;
    return {};
}

ChatResponse response_entry(const json& j) {
    if (!j.is_object()) throw ParseError("fixture: response must be an object");
    ChatResponse r;
    r.text = j.value("text", std::string{});
    if (j.contains("top_logprobs")) {
        std::vector<TokenLogprob> c;
        for (const auto& t : j.at("top_logprobs")) c.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
        r.top_logprobs = std::move(c);
    }
    return r;
}

class HttplibTransport : public Transport {
public:
    explicit HttplibTransport(const EndpointConfig& cfg) : base_(split_url(cfg.base_url)), timeout_(cfg.timeout) {}

    HttpReply post(const std::string& path, const std::string& body,
                   const std::map<std::string, std::string>& headers) override {
        ++g_http_attempts;
        httplib::Client cli(base_.scheme_host_port);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
        cli.set_connection_timeout(secs.count(), usecs.count());
        cli.set_read_timeout(secs.count(), usecs.count());
        cli.set_write_timeout(secs.count(), usecs.count());
        httplib::Headers h;
        for (const auto& [k, v] : headers) h.emplace(k, v);
        auto res = cli.Post(path, h, body, "application/json");
        if (!res) return {0, {}, httplib::to_string(res.error())};
        return {res->status, res->body, {}};
    }

private:
    UrlParts base_;
    std::chrono::milliseconds timeout_;
};

}  // namespace

void ChatRequest::validate() const {
    if (messages.empty()) throw ValidationError("chat request: needs at least one message");
    for (std::size_t i = 0; i < messages.size(); ++i) {
        const auto& m = messages[i];
        if (m.role != "system" && m.role != "user" && m.role != "assistant") {
            throw ValidationError("chat request: message " + std::to_string(i) + " has unknown role '" + m.role + "'");
        }
        if (!m.images.empty() && m.role != "user") {
            throw ValidationError("chat request: images are only allowed on user messages (message " +
                                  std::to_string(i) + " is " + m.role + ")");
        }
    }
    if (logprobs && top_logprobs < kMinTopLogprobs) {
        throw ValidationError("chat request: top_logprobs must be at least " + std::to_string(kMinTopLogprobs));
    }
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += tbl[v >> 18];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += tbl[v & 63];
    }
    if (i + 1 == bytes.size()) {
        const std::uint32_t v = bytes[i] << 16;
        out += tbl[v >> 18];
        out += tbl[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == bytes.size()) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out += tbl[v >> 18];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

json request_to_json(const ChatRequest& request) {
    return body_json(request,
                     [](const Rgb8& img) { return "data:image/png;base64," + base64_encode(encode_png(img)); });
}

json canonical_request(const ChatRequest& request) {
    return body_json(request, [](const Rgb8& img) {
        return "rgb8:" + std::to_string(img.width) + "x" + std::to_string(img.height) + ":" +
               hex16(fnv1a(img.pixels.data(), img.pixels.size()));
    });
}

std::string request_key(const ChatRequest& request) {
    const std::string s = canonical_request(request).dump();
    return hex16(fnv1a(s.data(), s.size()));
}

ChatResponse response_from_json(const json& body) {
    try {
        const auto& choice = body.at("choices").at(0);
        ChatResponse r;
        const auto& content = choice.at("message").at("content");
        r.text = content.is_null() ? std::string{} : content.get<std::string>();
        if (choice.contains("logprobs") && !choice.at("logprobs").is_null()) {
            const auto& lp = choice.at("logprobs");
            if (lp.contains("content") && lp.at("content").is_array() && !lp.at("content").empty()) {
                std::vector<TokenLogprob> c;
                for (const auto& t : lp.at("content").at(0).at("top_logprobs")) {
                    c.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
                }
                r.top_logprobs = std::move(c);
            }
        }
        return r;
    } catch (const json::exception& e) {
        throw ExternalServiceError(std::string("chat response: unexpected body: ") + e.what(), false);
    }
}

json response_to_json(const ChatResponse& response) {
    json j{{"text", response.text}};
    if (response.top_logprobs) {
        j["top_logprobs"] = json::array();
        for (const auto& t : *response.top_logprobs) j["top_logprobs"].push_back({{"token", t.token}, {"logprob", t.logprob}});
    }
    return j;
}

// ---- HTTP --------------------------------------------------------------

EndpointConfig EndpointConfig::from_env() {
    EndpointConfig c;
    const char* url = std::getenv("T2IS_ENDPOINT");
    if (!url || !*url) throw ValidationError("endpoint: T2IS_ENDPOINT is not set");
    c.base_url = url;
    if (const char* k = std::getenv("T2IS_API_KEY")) c.api_key = k;
    if (const char* m = std::getenv("T2IS_MODEL")) c.model = m;
    return c;
}

UrlParts split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("endpoint: URL needs a scheme: " + url);
    const std::string scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") throw ValidationError("endpoint: unsupported scheme " + scheme);
#ifndef T2IS_WITH_HTTPS
    if (scheme == "https") throw ValidationError("endpoint: built without TLS support");
#endif
    const auto path_start = url.find('/', scheme_end + 3);
    UrlParts p;
    p.scheme_host_port = url.substr(0, path_start);
    if (path_start != std::string::npos) {
        p.path_prefix = url.substr(path_start);
        while (!p.path_prefix.empty() && p.path_prefix.back() == '/') p.path_prefix.pop_back();
    }
    if (p.scheme_host_port.size() <= scheme_end + 3) throw ValidationError("endpoint: URL has no host: " + url);
    return p;
}

std::unique_ptr<Transport> make_http_transport(const EndpointConfig& config) {
    return std::make_unique<HttplibTransport>(config);
}

std::uint64_t http_attempt_count() { return g_http_attempts.load(); }

HttpChatClient::HttpChatClient(EndpointConfig config) : HttpChatClient(config, make_http_transport(config)) {}

HttpChatClient::HttpChatClient(EndpointConfig config, std::unique_ptr<Transport> transport, Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleep_(std::move(sleeper)) {
    if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    if (config_.max_in_flight == 0) throw ValidationError("endpoint: max_in_flight must be positive");
    path_ = split_url(config_.base_url).path_prefix + "/chat/completions";
}

std::size_t HttpChatClient::peak_in_flight() const {
    std::lock_guard lock(mu_);
    return peak_;
}

ChatResponse HttpChatClient::chat(const ChatRequest& request) {
    ChatRequest req = request;
    if (req.model.empty()) req.model = config_.model;
    const std::string body = request_to_json(req).dump();
    std::map<std::string, std::string> headers;
    if (!config_.api_key.empty()) headers["Authorization"] = "Bearer " + config_.api_key;

    {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return in_flight_ < config_.max_in_flight; });
        ++in_flight_;
        peak_ = std::max(peak_, in_flight_);
    }
    struct Release {
        HttpChatClient* self;
        ~Release() {
            {
                std::lock_guard lock(self->mu_);
                --self->in_flight_;
            }
            self->cv_.notify_one();
        }
    } release{this};

    auto delay = config_.backoff;
    for (std::size_t attempt = 0;; ++attempt) {
        const HttpReply reply = transport_->post(path_, body, headers);
        if (reply.status >= 200 && reply.status < 300) {
            json parsed;
            try {
                parsed = json::parse(reply.body);
            } catch (const json::exception& e) {
                throw ExternalServiceError(std::string("chat response: invalid JSON: ") + e.what(), false,
                                           reply.status);
            }
            ChatResponse r = response_from_json(parsed);
            if (req.logprobs && (!r.top_logprobs || r.top_logprobs->empty())) {
                throw CapabilityError("chat response: logprobs requested but the server returned none");
            }
            return r;
        }
        const std::string what = reply.status == 0 ? "chat request failed: " + reply.error
                                                   : "chat request failed with HTTP " + std::to_string(reply.status);
        if (!retryable_status(reply.status)) throw ExternalServiceError(what, false, reply.status);
        if (attempt >= config_.max_retries) {
            throw ExternalServiceError(what + " after " + std::to_string(attempt + 1) + " attempts", true,
                                       reply.status);
        }
        sleep_(delay);
        delay *= 2;
    }
}

// ---- offline clients -----------------------------------------------------

void FixtureClient::add_transcript(const json& transcript) {
    if (!transcript.is_object() || !transcript.contains("entries") || !transcript.at("entries").is_array()) {
        throw ParseError("fixture: expected an object with an \"entries\" array");
    }
    for (std::size_t i = 0; i < transcript.at("entries").size(); ++i) {
        const auto& e = transcript.at("entries").at(i);
        try {
            ChatResponse r = response_entry(e.at("response"));
            if (e.contains("key")) {
                add_keyed(e.at("key").get<std::string>(), std::move(r));
            } else if (e.contains("match")) {
                add_match(e.at("match").get<std::string>(), std::move(r));
            } else {
                throw ParseError("entry has neither \"key\" nor \"match\"");
            }
        } catch (const json::exception& ex) {
            throw ParseError("fixture: entry " + std::to_string(i) + ": " + ex.what());
        } catch (const ParseError& ex) {
            throw ParseError("fixture: entry " + std::to_string(i) + ": " + ex.what());
        }
    }
}

void FixtureClient::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("fixture: cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("fixture: " + path + ": " + e.what());
    }
    add_transcript(j);
}

void FixtureClient::load_directory(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ValidationError("fixture: not a directory: " + dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) load_file(f.string());
}

void FixtureClient::add_keyed(const std::string& key, ChatResponse response) {
    std::lock_guard lock(mu_);
    keyed_[key] = std::move(response);
}

void FixtureClient::add_match(const std::string& needle, ChatResponse response) {
    std::lock_guard lock(mu_);
    matches_.emplace_back(needle, std::move(response));
}

ChatResponse FixtureClient::chat(const ChatRequest& request) {
    const std::string key = request_key(request);
    const std::string text = last_user_text(request);
    std::lock_guard lock(mu_);
    ++calls_;
    if (auto it = keyed_.find(key); it != keyed_.end()) return it->second;
    for (const auto& [needle, resp] : matches_)
        if (text.find(needle) != std::string::npos) return resp;
    throw ExternalServiceError("fixture: no recorded response for request " + key, false);
}

std::size_t FixtureClient::calls() const {
    std::lock_guard lock(mu_);
    return calls_;
}

ChatResponse RecordingClient::chat(const ChatRequest& request) {
    ChatResponse r = inner_.chat(request);
    std::lock_guard lock(mu_);
    entries_.push_back({{"key", request_key(request)}, {"response", response_to_json(r)}});
    return r;
}

json RecordingClient::transcript() const {
    std::lock_guard lock(mu_);
    return json{{"version", 1}, {"entries", entries_}};
}

// ---- Yes/No scoring ------------------------------------------------------

double yes_probability(double yes_logprob, double no_logprob) {
    if (!std::isfinite(yes_logprob) || !std::isfinite(no_logprob)) throw ScoringError("yes/no logprob is not finite");
    // The smaller probability is computed directly and the larger as its
    // complement, so p(a, b) + p(b, a) == 1 exactly.
    const double minority = 1.0 / (1.0 + std::exp(std::abs(yes_logprob - no_logprob)));
    return yes_logprob >= no_logprob ? 1.0 - minority : minority;
}

double yes_probability(const ChatResponse& response) {
    if (!response.top_logprobs || response.top_logprobs->empty()) {
        throw CapabilityError("yes/no scoring: response carries no first-token logprobs");
    }
    const double none = -std::numeric_limits<double>::infinity();
    double yes = none, no = none;
    for (const auto& t : *response.top_logprobs) {
        if (std::find(yes_forms().begin(), yes_forms().end(), t.token) != yes_forms().end()) yes = std::max(yes, t.logprob);
        if (std::find(no_forms().begin(), no_forms().end(), t.token) != no_forms().end()) no = std::max(no, t.logprob);
    }
    if (yes == none || no == none) {
        throw ScoringError(std::string("yes/no scoring: no '") + (yes == none ? "Yes" : "No") + "' form among " +
                           std::to_string(response.top_logprobs->size()) + " candidates");
    }
    return yes_probability(yes, no);
}

ChatRequest yes_no_request(const std::string& model, const std::string& question, std::vector<Rgb8> images) {
    ChatRequest r;
    r.model = model;
    r.messages.push_back({"system", "Answer the question about the image(s) with a single word: Yes or No.", {}});
    r.messages.push_back({"user", question, std::move(images)});
    r.max_tokens = 1;
    r.logprobs = true;
    r.top_logprobs = 10;
    return r;
}

}  // namespace t2is
