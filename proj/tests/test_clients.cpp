#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "tagpr/clients.hpp"

using namespace tagpr;

namespace {

// Local completion endpoint on an ephemeral port.
struct FakeServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;
  std::string last_body;
  std::string last_auth;
  std::atomic<int> hits{0};
  int fail_first = 0;  // answer 503 to the first N requests

  FakeServer() {
    server.Post("/v1/complete", [this](const httplib::Request& req, httplib::Response& res) {
      const int n_hit = ++hits;
      last_body = req.body;
      last_auth = req.get_header_value("Authorization");
      if (n_hit <= fail_first) {
        res.status = 503;
        return;
      }
      const auto j = nlohmann::json::parse(req.body);
      nlohmann::json texts = nlohmann::json::array();
      for (int i = 0; i < j.at("n").get<int>(); ++i) texts.push_back(j.at("prompt").get<std::string>() + "#" + std::to_string(i));
      res.set_content(nlohmann::json{{"texts", texts}}.dump(), "application/json");
    });
    server.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("{\"nope\": 1}", "application/json");
    });
    server.Post("/teapot", [](const httplib::Request&, httplib::Response& res) { res.status = 418; });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~FakeServer() {
    server.stop();
    thread.join();
  }

  [[nodiscard]] std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port) + path; }
};

}  // namespace

TEST(HttpClient, PostsContractBodyAndBearer) {
  FakeServer fake;
  HttpClient client({fake.url("/v1/complete"), "sekret", 5});
  const auto texts = client.complete({"hello", 3, 0.7, 42});
  EXPECT_EQ(texts, (std::vector<std::string>{"hello#0", "hello#1", "hello#2"}));
  const auto body = nlohmann::json::parse(fake.last_body);
  EXPECT_EQ(body.at("prompt"), "hello");
  EXPECT_EQ(body.at("n"), 3);
  EXPECT_DOUBLE_EQ(body.at("temperature").get<double>(), 0.7);
  EXPECT_EQ(body.at("seed"), 42);
  EXPECT_EQ(fake.last_auth, "Bearer sekret");

  HttpClient anonymous({fake.url("/v1/complete"), "", 5});
  anonymous.complete({"x", 1, 1.0, std::nullopt});
  EXPECT_TRUE(fake.last_auth.empty());
  EXPECT_FALSE(nlohmann::json::parse(fake.last_body).contains("seed"));
}

TEST(HttpClient, FailuresBecomeClientErrors) {
  FakeServer fake;
  EXPECT_THROW(HttpClient({fake.url("/teapot"), "", 5}).complete({"x", 1, 1.0, std::nullopt}), ClientError);
  EXPECT_THROW(HttpClient({fake.url("/broken"), "", 5}).complete({"x", 1, 1.0, std::nullopt}), ClientError);
  // nothing listens on port 1
  EXPECT_THROW(HttpClient({"http://127.0.0.1:1/v1", "", 1}).complete({"x", 1, 1.0, std::nullopt}), ClientError);
  EXPECT_THROW(HttpClient({"no-scheme", "", 1}), std::invalid_argument);
}

TEST(HttpClient, RetryRecoversFromTransientErrors) {
  FakeServer fake;
  fake.fail_first = 2;
  HttpClient client({fake.url("/v1/complete"), "", 5});
  const auto texts = with_retry(RetryPolicy{3, std::chrono::milliseconds(1)}, [&] { return client.complete({"p", 1, 1.0, std::nullopt}); });
  EXPECT_EQ(texts.size(), 1u);
  EXPECT_EQ(fake.hits.load(), 3);
}

TEST(WithRetry, GivesUpAfterAttempts) {
  int calls = 0;
  auto fail = [&]() -> int {
    ++calls;
    throw ClientError("x");
  };
  EXPECT_THROW(with_retry(RetryPolicy{4, std::chrono::milliseconds(0)}, fail), ClientError);
  EXPECT_EQ(calls, 4);
  // other exceptions are not retried
  calls = 0;
  auto other = [&]() -> int {
    ++calls;
    throw std::logic_error("bug");
  };
  EXPECT_THROW(with_retry(RetryPolicy{4, std::chrono::milliseconds(0)}, other), std::logic_error);
  EXPECT_EQ(calls, 1);
}

TEST(MockClient, DeterministicPerPromptAndIndex) {
  auto writer = [](std::string_view prompt, Rng& rng) { return std::string(prompt) + std::to_string(rng() % 1000); };
  MockClient a(writer, 5), b(writer, 5), c(writer, 6);
  const auto x = a.complete({"p", 4, 1.0, std::nullopt});
  EXPECT_EQ(x, b.complete({"p", 4, 1.0, std::nullopt}));
  EXPECT_NE(x, c.complete({"p", 4, 1.0, std::nullopt}));
  EXPECT_EQ(x.size(), 4u);
  // an explicit request seed overrides the client seed
  EXPECT_EQ(a.complete({"p", 2, 1.0, 77}), c.complete({"p", 2, 1.0, 77}));
}

TEST(HttpClientConfig, FromEnvironment) {
  ::unsetenv("TAGPR_ENDPOINT");
  ::unsetenv("TAGPR_API_KEY");
  EXPECT_FALSE(HttpClientConfig::from_environment());
  ::setenv("TAGPR_ENDPOINT", "http://example.invalid/c", 1);
  ::setenv("TAGPR_API_KEY", "k", 1);
  const auto cfg = HttpClientConfig::from_environment();
  ASSERT_TRUE(cfg);
  EXPECT_EQ(cfg->endpoint, "http://example.invalid/c");
  EXPECT_EQ(cfg->api_key, "k");
  ::unsetenv("TAGPR_ENDPOINT");
  ::unsetenv("TAGPR_API_KEY");
}
