// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "monolex/llmclient.hpp"
#include "test_util.hpp"

using namespace monolex;
using testutil::TempDir;

namespace {

ChatRequest req(const std::string& text, const std::string& endpoint = "judge") {
    ChatRequest r;
    r.endpoint = endpoint;
    r.model = "m";
    r.messages = {{"system", "be brief"}, {"user", text}};
    return r;
}

FixtureEntry entry(const ChatRequest& r, std::vector<std::string> replies) {
    return {fixture_key(r), std::move(replies), canonical_request(r)};
}

// Local chat-completions server driven by a status script.
class StubServer {
public:
    explicit StubServer(std::vector<int> statuses, std::string prefix = "") : statuses_(std::move(statuses)) {
        svr_.Post(prefix + "/v1/chat/completions", [this](const httplib::Request& rq, httplib::Response& rs) {
            const std::size_t i = hits_++;
            last_auth_ = rq.get_header_value("Authorization");
            last_body_ = rq.body;
            const int status = i < statuses_.size() ? statuses_[i] : 200;
            rs.status = status;
            if (status == 200) {
                const json reply = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", "pong"}}}}})}};
                rs.set_content(reply.dump(), "application/json");
            } else {
                rs.set_content("{\"error\":\"status " + std::to_string(status) + "\"}", "application/json");
            }
        });
        port_ = svr_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { svr_.listen_after_bind(); });
        svr_.wait_until_ready();
    }
    ~StubServer() {
        svr_.stop();
        thread_.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    std::size_t hits() const { return hits_; }
    const std::string& last_auth() const { return last_auth_; }
    const std::string& last_body() const { return last_body_; }

private:
    httplib::Server svr_;
    std::vector<int> statuses_;
    std::atomic<std::size_t> hits_{0};
    std::string last_auth_, last_body_;
    int port_ = 0;
    std::thread thread_;
};

EndpointConfig http_endpoint(const std::string& url) {
    EndpointConfig c;
    c.name = "subject";
    c.base_url = url;
    c.model = "tiny";
    c.backoff_base_s = 0.01;
    c.timeout_s = 5;
    c.max_retries = 2;
    c.api_key_env = "MONOLEX_TEST_KEY";
    return c;
}

} // namespace

TEST(Request, ValidationRules) {
    ChatRequest r;
    EXPECT_THROW(validate(r), ValidationError);
    r.messages = {{"assistant", "hi"}};
    EXPECT_THROW(validate(r), ValidationError);
    r.messages = {{"user", "hi"}, {"tool", "x"}};
    EXPECT_THROW(validate(r), ValidationError);
}

TEST(Request, KeyIgnoresMaxTokensButNotTemperature) {
    auto a = req("q"), b = req("q");
    b.max_tokens = 7;
    EXPECT_EQ(fixture_key(a), fixture_key(b));
    b.temperature = 0.5;
    EXPECT_NE(fixture_key(a), fixture_key(b));
    EXPECT_NE(fixture_key(a), fixture_key(req("q", "rephraser")));
    EXPECT_EQ(fixture_key(a).size(), 64u);
}

TEST(Request, Sha256KnownVector) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Fixture, EchoAndSequence) {
    const auto q = req("same?");
    FixtureClient c("judge", "m", {entry(q, {"EQUIVALENT: same constraint"}), entry(req("twice"), {"A", "B"})});
    EXPECT_EQ(c.chat(q), "EQUIVALENT: same constraint");
    EXPECT_EQ(c.chat(req("twice")), "A");
    EXPECT_EQ(c.chat(req("twice")), "B");
    EXPECT_EQ(c.chat(req("twice")), "B");
    EXPECT_EQ(c.stats().calls, 4u);
}

TEST(Fixture, MissNamesKeyAndNeighbours) {
    FixtureClient c("judge", "m", {entry(req("alpha"), {"x"}), entry(req("beta"), {"y"})});
    const auto miss = req("alphz");
    try {
        c.chat(miss);
        FAIL();
    } catch (const ClientError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(fixture_key(miss)), std::string::npos);
        EXPECT_NE(msg.find("nearest"), std::string::npos);
        // "alpha" shares the longer prefix and is listed first.
        EXPECT_LT(msg.find(fixture_key(req("alpha"))), msg.find(fixture_key(req("beta"))));
    }
}

TEST(Fixture, FileRoundTripAndMalformedLine) {
    TempDir tmp;
    write_fixtures({entry(req("a"), {"1", "2"})}, tmp / "f.jsonl");
    auto c = FixtureClient::from_file("judge", "m", tmp / "f.jsonl");
    EXPECT_EQ(c->chat(req("a")), "1");
    testutil::spit(tmp / "bad.jsonl", "{\"key\": \"k\"}\n");
    EXPECT_THROW(read_fixtures(tmp / "bad.jsonl"), IoError);
    EXPECT_THROW(read_fixtures(tmp / "missing.jsonl"), IoError);
}

TEST(Scripted, RepliesInOrderThenFails) {
    ScriptedClient c("rephraser", {"one", "two"});
    EXPECT_EQ(ask(c, {{"user", "a"}}), "one");
    std::vector<Exchange> log;
    EXPECT_EQ(ask(c, {{"user", "b"}}, &log), "two");
    EXPECT_THROW(c.chat(c.request({{"user", "c"}})), ClientError);
    ASSERT_EQ(log.size(), 1u);
    EXPECT_EQ(log[0].reply, "two");
    EXPECT_EQ(c.requests().size(), 3u);
}

TEST(Http, RetriesAfter429ThenSucceeds) {
    StubServer srv({429});
    ::setenv("MONOLEX_TEST_KEY", "sekret", 1);
    HttpClient c(http_endpoint(srv.url()));
    EXPECT_EQ(c.chat(c.request({{"user", "ping"}})), "pong");
    EXPECT_EQ(c.stats().retries, 1u);
    EXPECT_EQ(srv.hits(), 2u);
    EXPECT_EQ(srv.last_auth(), "Bearer sekret");
    const auto body = json::parse(srv.last_body());
    EXPECT_EQ(body["model"], "tiny");
    EXPECT_EQ(body["temperature"], 0.0);
    EXPECT_EQ(body["messages"][0]["content"], "ping");
    EXPECT_TRUE(body.contains("max_tokens"));
    ::unsetenv("MONOLEX_TEST_KEY");
}

TEST(Http, NonRetryableStatusFailsImmediately) {
    StubServer srv({400});
    HttpClient c(http_endpoint(srv.url()));
    try {
        c.chat(c.request({{"user", "ping"}}));
        FAIL();
    } catch (const ClientError& e) {
        EXPECT_NE(std::string(e.what()).find("HTTP 400"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("status 400"), std::string::npos);
    }
    EXPECT_EQ(srv.hits(), 1u);
    EXPECT_EQ(c.stats().retries, 0u);
}

TEST(Http, RetriesExhausted) {
    StubServer srv({503, 503, 503, 503});
    HttpClient c(http_endpoint(srv.url()));
    EXPECT_THROW(c.chat(c.request({{"user", "ping"}})), ClientError);
    EXPECT_EQ(srv.hits(), 3u);
    EXPECT_EQ(c.stats().retries, 2u);
}

TEST(Http, BaseUrlPathPrefixKept) {
    StubServer srv({}, "/gateway");
    HttpClient c(http_endpoint(srv.url() + "/gateway/"));
    EXPECT_EQ(c.chat(c.request({{"user", "ping"}})), "pong");
}

TEST(Recording, RecordThenReplay) {
    TempDir tmp;
    int n = 0;
    CallbackClient live("subject", [&](const ChatRequest&) { return "live " + std::to_string(++n); });
    {
        auto rec = record_mode(live, tmp / "rec.jsonl");
        EXPECT_EQ(ask(*rec, {{"user", "q1"}}), "live 1");
        EXPECT_EQ(ask(*rec, {{"user", "q1"}}), "live 2");
        EXPECT_EQ(ask(*rec, {{"user", "q2"}}), "live 3");
    }
    const auto entries = read_fixtures(tmp / "rec.jsonl");
    ASSERT_EQ(entries.size(), 2u);
    EXPECT_EQ(entries[0].replies, (std::vector<std::string>{"live 1", "live 2"}));
    FixtureClient replay("subject", "callback", entries);
    EXPECT_EQ(ask(replay, {{"user", "q1"}}), "live 1");
    EXPECT_EQ(ask(replay, {{"user", "q1"}}), "live 2");
    EXPECT_EQ(ask(replay, {{"user", "q2"}}), "live 3");
    EXPECT_THROW(record_mode(live, "/proc/nonexistent/dir/x.jsonl"), IoError);
}

TEST(Recording, UntouchedWhenNotRecording) {
    TempDir tmp;
    CallbackClient live("subject", [](const ChatRequest&) { return "r"; });
    ask(live, {{"user", "q"}});
    EXPECT_FALSE(fs::exists(tmp / "rec.jsonl"));
}

TEST(ClientSet, RolesResolveToEndpoints) {
    TempDir tmp;
    const auto q = ChatRequest{"shared", "m", {{"user", "hello"}}, 0.0, 512};
    write_fixtures({entry(q, {"hi"})}, tmp / "shared.jsonl");
    const json doc = {{"clients",
                       {{"endpoints", {{"shared", {{"fixture", "shared.jsonl"}, {"model", "m"}}}}},
                        {"roles", {{"judge", "shared"}, {"subject", "shared"}}}}}};
    ClientSet set(config_from_json(doc, tmp.path()).clients);
    EXPECT_EQ(&set.for_role("judge"), &set.for_role("subject"));
    EXPECT_EQ(ask(set.for_role("judge"), {{"user", "hello"}}), "hi");
    EXPECT_THROW(set.for_role("clarifier"), ConfigError);
    set.add(std::make_unique<ScriptedClient>("clarifier", std::vector<std::string>{"gloss"}));
    EXPECT_EQ(ask(set.for_role("clarifier"), {{"user", "x"}}), "gloss");
}
