#pragma once

// Text-completion clients used by the data pipeline (generation, judging,
// tagging). Wire contract for the remote client:
//   POST <endpoint>  {"prompt": str, "n": int, "temperature": num, "seed"?: int}
//   200 ->           {"texts": [str, ...]}

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "tagpr/random.hpp"

namespace tagpr {

struct CompletionRequest {
  std::string prompt;
  int n = 1;
  double temperature = 1.0;
  std::optional<std::uint64_t> seed;
};

class ClientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationClient {
 public:
  virtual ~GenerationClient() = default;
  /// Returns the completions; implementations may return fewer than
  /// requested, which callers treat as a contract violation.
  virtual std::vector<std::string> complete(const CompletionRequest& req) = 0;
};

/// Deterministic stand-in: text i is `writer(prompt, rng_i)` with rng_i
/// seeded from (seed, prompt, i). Safe for concurrent calls when `writer` is.
class MockClient final : public GenerationClient {
 public:
  using Writer = std::function<std::string(std::string_view prompt, Rng& rng)>;

  MockClient(Writer writer, std::uint64_t seed) : writer_(std::move(writer)), seed_(seed) {}

  std::vector<std::string> complete(const CompletionRequest& req) override {
    std::vector<std::string> out;
    const auto base = req.seed.value_or(seed_);
    for (int i = 0; i < req.n; ++i) {
      Rng rng(derive_seed(base, fnv1a(req.prompt), static_cast<std::uint64_t>(i)));
      out.push_back(writer_(req.prompt, rng));
    }
    return out;
  }

 private:
  Writer writer_;
  std::uint64_t seed_;
};

struct HttpClientConfig {
  std::string endpoint;  // e.g. http://127.0.0.1:8080/v1/complete
  std::string api_key;   // sent as a bearer token when non-empty
  int timeout_seconds = 60;

  /// Endpoint and credential from TAGPR_ENDPOINT / TAGPR_API_KEY.
  static std::optional<HttpClientConfig> from_environment() {
    const char* ep = std::getenv("TAGPR_ENDPOINT");
    if (ep == nullptr || *ep == '\0') return std::nullopt;
    HttpClientConfig c;
    c.endpoint = ep;
    if (const char* key = std::getenv("TAGPR_API_KEY")) c.api_key = key;
    return c;
  }
};

class HttpClient final : public GenerationClient {
 public:
  explicit HttpClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {
    const auto scheme_end = cfg_.endpoint.find("://");
    const auto path_begin = cfg_.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    if (scheme_end == std::string::npos) throw std::invalid_argument("HttpClient: endpoint needs a scheme");
    base_ = cfg_.endpoint.substr(0, path_begin);
    path_ = path_begin == std::string::npos ? "/" : cfg_.endpoint.substr(path_begin);
  }

  std::vector<std::string> complete(const CompletionRequest& req) override {
    nlohmann::json body = {{"prompt", req.prompt}, {"n", req.n}, {"temperature", req.temperature}};
    if (req.seed) body["seed"] = *req.seed;
    httplib::Client cli(base_);
    cli.set_connection_timeout(cfg_.timeout_seconds);
    cli.set_read_timeout(cfg_.timeout_seconds);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    auto res = cli.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw ClientError("request to " + cfg_.endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw ClientError("endpoint returned HTTP " + std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("texts").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ClientError(std::string("malformed response body: ") + e.what());
    }
  }

 private:
  HttpClientConfig cfg_;
  std::string base_;
  std::string path_;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
};

/// Calls `fn` until it succeeds or the attempts are exhausted, doubling the
/// wait each time. Rethrows the last ClientError.
template <class Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
  auto wait = policy.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const ClientError&) {
      if (attempt >= policy.attempts) throw;
      std::this_thread::sleep_for(wait);
      wait *= 2;
    }
  }
}

}  // namespace tagpr
