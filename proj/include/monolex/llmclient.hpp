// SPDX-License-Identifier: Apache-2.0
//
// Chat-completion clients. Everything above this header reaches a language
// model only through ChatClient; this is the one place that touches the
// network.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "httplib.h"
#include "monolex/actstore.hpp"
#include "monolex/error.hpp"

namespace monolex {

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string content;

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatRequest {
    std::string endpoint;
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    std::size_t max_tokens = 512;
};

inline void validate(const ChatRequest& req) {
    if (req.messages.empty()) throw ValidationError("ChatRequest: messages must be nonempty");
    const auto& first = req.messages.front().role;
    if (first != "system" && first != "user") throw ValidationError("ChatRequest: first message role must be system or user");
    for (const auto& m : req.messages)
        if (m.role != "system" && m.role != "user" && m.role != "assistant")
            throw ValidationError("ChatRequest: unknown role \"" + m.role + "\"");
}

inline json messages_json(const std::vector<ChatMessage>& msgs) {
    json arr = json::array();
    for (const auto& m : msgs) arr.push_back({{"role", m.role}, {"content", m.content}});
    return arr;
}

inline std::vector<ChatMessage> messages_from_json(const json& arr) {
    std::vector<ChatMessage> out;
    for (const auto& m : arr) out.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    return out;
}

/// Canonical form hashed into fixture keys: keys sorted, compact, and only
/// the fields that determine the reply (endpoint, model, messages, temperature).
inline std::string canonical_request(const ChatRequest& req) {
    json j = {{"endpoint", req.endpoint},
              {"model", req.model},
              {"messages", messages_json(req.messages)},
              {"temperature", req.temperature}};
    return j.dump();
}

inline std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256: EVP_Digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

inline std::string fixture_key(const ChatRequest& req) { return sha256_hex(canonical_request(req)); }

struct ClientStats {
    std::size_t calls = 0;
    std::size_t retries = 0;
    std::size_t failures = 0;
};

class ChatClient {
public:
    virtual ~ChatClient() = default;

    /// Endpoint name this client answers for.
    virtual const std::string& endpoint() const = 0;
    virtual const std::string& model() const = 0;
    virtual std::string chat(const ChatRequest& req) = 0;
    virtual std::size_t max_tokens() const { return 512; }

    ClientStats stats() const {
        std::lock_guard lock(stats_mu_);
        return stats_;
    }

    /// Request addressed to this client's endpoint and model.
    ChatRequest request(std::vector<ChatMessage> messages) const {
        ChatRequest r;
        r.endpoint = endpoint();
        r.model = model();
        r.messages = std::move(messages);
        r.max_tokens = max_tokens();
        return r;
    }

protected:
    void count_call() {
        std::lock_guard lock(stats_mu_);
        ++stats_.calls;
    }
    void count_retry() {
        std::lock_guard lock(stats_mu_);
        ++stats_.retries;
    }
    void count_failure() {
        std::lock_guard lock(stats_mu_);
        ++stats_.failures;
    }

private:
    mutable std::mutex stats_mu_;
    ClientStats stats_;
};

// ---------------------------------------------------------------------------
// Fixture (mock) client
// ---------------------------------------------------------------------------

struct FixtureEntry {
    std::string key;
    std::vector<std::string> replies;
    std::string request;  // canonical request, optional; used for miss diagnostics
};

inline std::vector<FixtureEntry> read_fixtures(const fs::path& path) {
    std::vector<FixtureEntry> out;
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fixture file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            FixtureEntry e;
            e.key = j.at("key").get<std::string>();
            e.replies = j.at("replies").get<std::vector<std::string>>();
            if (j.contains("request")) e.request = j["request"].is_string() ? j["request"].get<std::string>() : j["request"].dump();
            if (e.replies.empty()) throw ValidationError("empty replies");
            out.push_back(std::move(e));
        } catch (const std::exception& ex) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed fixture: " + ex.what());
        }
    }
    return out;
}

inline void write_fixtures(const std::vector<FixtureEntry>& entries, const fs::path& path) {
    std::string out;
    for (const auto& e : entries) {
        json j = {{"key", e.key}, {"replies", e.replies}};
        if (!e.request.empty()) j["request"] = json::parse(e.request);
        out += j.dump() + "\n";
    }
    detail::write_file(path, out);
}

/// Replays scripted replies keyed by fixture_key(request). Repeated identical
/// requests walk the reply sequence; the last reply repeats once it is used up.
class FixtureClient : public ChatClient {
public:
    FixtureClient(std::string endpoint, std::string model, std::vector<FixtureEntry> entries)
        : endpoint_(std::move(endpoint)), model_(std::move(model)) {
        for (auto& e : entries) {
            order_.push_back(e.key);
            entries_[e.key] = std::move(e);
        }
    }

    static std::unique_ptr<FixtureClient> from_file(std::string endpoint, std::string model, const fs::path& path) {
        return std::make_unique<FixtureClient>(std::move(endpoint), std::move(model), read_fixtures(path));
    }

    const std::string& endpoint() const override { return endpoint_; }
    const std::string& model() const override { return model_; }

    std::string chat(const ChatRequest& req) override {
        validate(req);
        count_call();
        const std::string canon = canonical_request(req);
        const std::string key = sha256_hex(canon);
        std::lock_guard lock(mu_);
        auto it = entries_.find(key);
        if (it == entries_.end()) {
            count_failure();
            throw ClientError("fixture miss on endpoint \"" + endpoint_ + "\": no reply for key " + key +
                              "; nearest fixture keys: " + nearest(canon));
        }
        auto& used = served_[key];
        const auto& replies = it->second.replies;
        const std::string& reply = replies[std::min(used, replies.size() - 1)];
        ++used;
        return reply;
    }

private:
    // Up to three keys whose recorded request shares the longest prefix with `canon`.
    std::string nearest(const std::string& canon) const {
        std::vector<std::pair<std::size_t, std::string>> scored;
        for (const auto& key : order_) {
            const auto& req = entries_.at(key).request;
            const auto mis = std::mismatch(canon.begin(), canon.end(), req.begin(), req.end());
            scored.emplace_back(static_cast<std::size_t>(mis.first - canon.begin()), key);
        }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        std::string out;
        for (std::size_t i = 0; i < scored.size() && i < 3; ++i) out += (i ? ", " : "") + scored[i].second;
        return out.empty() ? "(fixture file is empty)" : out;
    }

    std::string endpoint_;
    std::string model_;
    std::map<std::string, FixtureEntry> entries_;
    std::vector<std::string> order_;
    std::map<std::string, std::size_t> served_;
    std::mutex mu_;
};

/// Returns replies in order regardless of the request; records every request.
class ScriptedClient : public ChatClient {
public:
    ScriptedClient(std::string endpoint, std::vector<std::string> replies, std::string model = "scripted")
        : endpoint_(std::move(endpoint)), model_(std::move(model)), replies_(std::move(replies)) {}

    const std::string& endpoint() const override { return endpoint_; }
    const std::string& model() const override { return model_; }

    std::string chat(const ChatRequest& req) override {
        validate(req);
        count_call();
        std::lock_guard lock(mu_);
        requests_.push_back(req);
        if (next_ >= replies_.size()) {
            count_failure();
            throw ClientError("scripted client \"" + endpoint_ + "\" ran out of replies after " +
                              std::to_string(replies_.size()) + " calls");
        }
        return replies_[next_++];
    }

    const std::vector<ChatRequest>& requests() const { return requests_; }

private:
    std::string endpoint_;
    std::string model_;
    std::vector<std::string> replies_;
    std::size_t next_ = 0;
    std::vector<ChatRequest> requests_;
    std::mutex mu_;
};

/// Client backed by a function: rule-based responders and test oracles.
class CallbackClient : public ChatClient {
public:
    using Handler = std::function<std::string(const ChatRequest&)>;

    CallbackClient(std::string endpoint, Handler handler, std::string model = "callback")
        : endpoint_(std::move(endpoint)), model_(std::move(model)), handler_(std::move(handler)) {}

    const std::string& endpoint() const override { return endpoint_; }
    const std::string& model() const override { return model_; }

    std::string chat(const ChatRequest& req) override {
        validate(req);
        count_call();
        return handler_(req);
    }

private:
    std::string endpoint_;
    std::string model_;
    Handler handler_;
};

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

namespace detail {

class Semaphore {
public:
    explicit Semaphore(std::size_t n) : free_(n) {}
    void acquire() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return free_ > 0; });
        --free_;
    }
    void release() {
        {
            std::lock_guard lock(mu_);
            ++free_;
        }
        cv_.notify_one();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::size_t free_;
};

struct SplitUrl {
    std::string origin;  // scheme://host[:port]
    std::string prefix;  // path without trailing slash
};

inline SplitUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("base_url must include a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    SplitUrl out;
    out.origin = url.substr(0, path_start);
    if (path_start != std::string::npos) out.prefix = url.substr(path_start);
    while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
    return out;
}

} // namespace detail

/// POST {base}/v1/chat/completions with bearer auth. Retries 429 and 5xx with
/// exponential backoff; other statuses fail immediately.
class HttpClient : public ChatClient {
public:
    explicit HttpClient(EndpointConfig cfg) : cfg_(std::move(cfg)), slots_(cfg_.concurrency), url_(detail::split_url(cfg_.base_url)) {}

    const std::string& endpoint() const override { return cfg_.name; }
    const std::string& model() const override { return cfg_.model; }
    std::size_t max_tokens() const override { return cfg_.max_tokens; }

    std::string chat(const ChatRequest& req) override {
        validate(req);
        count_call();
        slots_.acquire();
        struct Release {
            detail::Semaphore& s;
            ~Release() { s.release(); }
        } release{slots_};

        const json body = {{"model", req.model},
                           {"messages", messages_json(req.messages)},
                           {"temperature", req.temperature},
                           {"max_tokens", req.max_tokens}};
        httplib::Headers headers;
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
            headers.emplace("Authorization", std::string("Bearer ") + key);

        httplib::Client cli(url_.origin);
        const auto timeout = std::chrono::duration<double>(cfg_.timeout_s);
        cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
        cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
        cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

        const std::string path = url_.prefix + "/v1/chat/completions";
        std::string last_error;
        for (std::size_t attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) {
                count_retry();
                const double wait = cfg_.backoff_base_s * std::pow(2.0, static_cast<double>(attempt - 1));
                std::this_thread::sleep_for(std::chrono::duration<double>(wait));
            }
            auto res = cli.Post(path, headers, body.dump(), "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status) + ": " + excerpt(res->body);
                continue;
            }
            if (res->status < 200 || res->status >= 300) {
                count_failure();
                throw ClientError("endpoint \"" + cfg_.name + "\" returned HTTP " + std::to_string(res->status) + ": " +
                                  excerpt(res->body));
            }
            try {
                const json reply = json::parse(res->body);
                return reply.at("choices").at(0).at("message").at("content").get<std::string>();
            } catch (const json::exception& e) {
                count_failure();
                throw ClientError("endpoint \"" + cfg_.name + "\" sent an unreadable completion: " + e.what());
            }
        }
        count_failure();
        throw ClientError("endpoint \"" + cfg_.name + "\" failed after " + std::to_string(cfg_.max_retries) +
                          " retries; last error: " + last_error);
    }

private:
    static std::string excerpt(const std::string& body) { return body.size() > 200 ? body.substr(0, 200) + "..." : body; }

    EndpointConfig cfg_;
    detail::Semaphore slots_;
    detail::SplitUrl url_;
};

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

/// Forwards to `inner` and freezes every (request, reply) pair into a fixture
/// file that FixtureClient can replay. The file is rewritten after each call.
class RecordingClient : public ChatClient {
public:
    RecordingClient(ChatClient& inner, fs::path path) : inner_(inner), path_(std::move(path)) {
        std::ofstream probe(path_, std::ios::app);
        if (!probe) throw IoError("cannot record to " + path_.string());
    }

    const std::string& endpoint() const override { return inner_.endpoint(); }
    const std::string& model() const override { return inner_.model(); }

    std::string chat(const ChatRequest& req) override {
        count_call();
        std::string reply = inner_.chat(req);
        std::lock_guard lock(mu_);
        const std::string canon = canonical_request(req);
        const std::string key = sha256_hex(canon);
        auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.key == key; });
        if (it == entries_.end()) entries_.push_back({key, {reply}, canon});
        else it->replies.push_back(reply);
        write_fixtures(entries_, path_);
        return reply;
    }

private:
    ChatClient& inner_;
    fs::path path_;
    std::vector<FixtureEntry> entries_;
    std::mutex mu_;
};

inline std::unique_ptr<ChatClient> record_mode(ChatClient& client, const fs::path& path) {
    return std::make_unique<RecordingClient>(client, path);
}

inline std::unique_ptr<ChatClient> make_client(const EndpointConfig& cfg) {
    if (!cfg.fixture.empty()) return FixtureClient::from_file(cfg.name, cfg.model, cfg.fixture);
    if (!cfg.base_url.empty()) return std::make_unique<HttpClient>(cfg);
    throw ConfigError("endpoint \"" + cfg.name + "\" has neither base_url nor fixture");
}

/// Lazily built clients for every configured endpoint, addressed by role.
class ClientSet {
public:
    explicit ClientSet(ClientsConfig cfg) : cfg_(std::move(cfg)) {}

    // Injects a prebuilt client under an endpoint name (tests, callbacks).
    void add(std::unique_ptr<ChatClient> client) {
        const std::string name = client->endpoint();
        owned_[name] = std::move(client);
    }

    bool has_role(const std::string& role) const {
        const auto name = cfg_.endpoint_for(role);
        return owned_.count(name) || cfg_.endpoints.count(name);
    }

    std::string endpoint_for(const std::string& role) const { return cfg_.endpoint_for(role); }

    ChatClient& for_role(const std::string& role) {
        const auto name = cfg_.endpoint_for(role);
        std::lock_guard lock(mu_);
        if (auto it = owned_.find(name); it != owned_.end()) return *it->second;
        auto ep = cfg_.endpoints.find(name);
        if (ep == cfg_.endpoints.end())
            throw ConfigError("no client endpoint \"" + name + "\" configured for role \"" + role + "\"");
        auto& slot = owned_[name];
        slot = make_client(ep->second);
        return *slot;
    }

private:
    ClientsConfig cfg_;
    std::map<std::string, std::unique_ptr<ChatClient>> owned_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Transcripts
// ---------------------------------------------------------------------------

struct Exchange {
    std::string endpoint;
    std::vector<ChatMessage> messages;
    std::string reply;
};

inline json to_json(const Exchange& e) {
    return {{"endpoint", e.endpoint}, {"messages", messages_json(e.messages)}, {"reply", e.reply}};
}

inline Exchange exchange_from_json(const json& j) {
    return {j.at("endpoint").get<std::string>(), messages_from_json(j.at("messages")), j.at("reply").get<std::string>()};
}

/// chat() that appends the exchange to `transcript` when given.
inline std::string ask(ChatClient& client, const std::vector<ChatMessage>& messages,
                       std::vector<Exchange>* transcript = nullptr) {
    std::string reply = client.chat(client.request(messages));
    if (transcript) transcript->push_back({client.endpoint(), messages, reply});
    return reply;
}

/// Replays one endpoint's recorded exchanges in order. Any request whose
/// messages differ from the recording is a divergence and fails.
class TranscriptClient : public ChatClient {
public:
    TranscriptClient(std::string endpoint, std::vector<Exchange> exchanges, std::string model = "replay")
        : endpoint_(std::move(endpoint)), model_(std::move(model)), exchanges_(std::move(exchanges)) {}

    const std::string& endpoint() const override { return endpoint_; }
    const std::string& model() const override { return model_; }

    std::string chat(const ChatRequest& req) override {
        validate(req);
        count_call();
        std::lock_guard lock(mu_);
        if (next_ >= exchanges_.size())
            throw ClientError("replay: endpoint \"" + endpoint_ + "\" has no recorded exchange #" + std::to_string(next_ + 1));
        const Exchange& e = exchanges_[next_];
        if (messages_json(e.messages) != messages_json(req.messages))
            throw ClientError("replay: endpoint \"" + endpoint_ + "\" diverged at exchange #" + std::to_string(next_ + 1));
        ++next_;
        return e.reply;
    }

    std::size_t remaining() const { return exchanges_.size() - next_; }

private:
    std::string endpoint_;
    std::string model_;
    std::vector<Exchange> exchanges_;
    std::size_t next_ = 0;
    std::mutex mu_;
};

} // namespace monolex
