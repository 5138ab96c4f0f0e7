#pragma once

// Personalization reward model with user embeddings.
//
// score(x) = (w + E_u) . phi(x) + b, reward = sigmoid(score). phi is a hashed,
// L2-normalized bag of field-prefixed tokens from the query, profile, chain
// and answer, plus answer-by-query token crosses so a user offset can express
// "this user answers c2 on items like this". Trained with the Bradley-Terry
// pairwise loss; w and the touched user rows are updated jointly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tagpr/random.hpp"
#include "tagpr/synth_env.hpp"
#include "tagpr/text_metrics.hpp"

namespace tagpr {

inline constexpr std::size_t kDefaultFeatureDim = 512;

using FeatureVector = std::vector<double>;

struct PrmuInput {
  std::string user_id;
  std::string query;
  std::vector<ProfileEntry> profile;
  std::string chain;
  std::string answer;
};

/// Hashed feature keys of one input, before bucketing. Exposed so tests can
/// recompute coordinates independently.
inline std::vector<std::string> feature_keys(std::string_view query, const std::vector<ProfileEntry>& profile,
                                             std::string_view chain, std::string_view answer) {
  std::vector<std::string> keys;
  const auto q = tokenize(query);
  const auto a = tokenize(answer);
  for (const auto& t : q) keys.push_back("q:" + t);
  for (const auto& p : profile) {
    for (const auto& t : tokenize(p.query)) keys.push_back("pq:" + t);
    for (const auto& t : tokenize(p.response)) keys.push_back("pr:" + t);
  }
  for (const auto& t : tokenize(chain)) keys.push_back("c:" + t);
  for (const auto& t : a) keys.push_back("a:" + t);
  for (const auto& at : a)
    for (const auto& qt : q) keys.push_back("x:" + at + "|" + qt);
  return keys;
}

inline std::size_t feature_bucket(std::string_view key, std::size_t dim) {
  return static_cast<std::size_t>(fnv1a(key) % dim);
}

inline FeatureVector featurize(std::string_view /*user_id*/, std::string_view query,
                               const std::vector<ProfileEntry>& profile, std::string_view chain,
                               std::string_view answer, std::size_t dim = kDefaultFeatureDim) {
  FeatureVector phi(dim, 0.0);
  for (const auto& k : feature_keys(query, profile, chain, answer)) phi[feature_bucket(k, dim)] += 1.0;
  double norm = 0.0;
  for (double v : phi) norm += v * v;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (auto& v : phi) v /= norm;
  }
  return phi;
}

inline FeatureVector featurize(const PrmuInput& x, std::size_t dim = kDefaultFeatureDim) {
  return featurize(x.user_id, x.query, x.profile, x.chain, x.answer, dim);
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

struct PrmuModel {
  std::size_t dim = kDefaultFeatureDim;
  std::vector<double> w;
  double b = 0.0;
  std::map<std::string, std::vector<double>, std::less<>> users;

  PrmuModel() : w(kDefaultFeatureDim, 0.0) {}
  explicit PrmuModel(std::size_t d) : dim(d), w(d, 0.0) {}

  /// Embedding row of `user_id`, or nullptr for unknown users (zero row).
  [[nodiscard]] const std::vector<double>* embedding(std::string_view user_id) const {
    auto it = users.find(user_id);
    return it == users.end() ? nullptr : &it->second;
  }

  std::vector<double>& embedding_mut(std::string_view user_id) {
    auto it = users.find(user_id);
    if (it == users.end()) it = users.emplace(std::string(user_id), std::vector<double>(dim, 0.0)).first;
    return it->second;
  }

  [[nodiscard]] bool finite() const {
    auto ok = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    if (!ok(w) || !std::isfinite(b)) return false;
    return std::all_of(users.begin(), users.end(), [&](const auto& kv) { return ok(kv.second); });
  }

  friend bool operator==(const PrmuModel&, const PrmuModel&) = default;
};

/// Pre-sigmoid logit.
inline double score(const PrmuModel& m, std::string_view user_id, const FeatureVector& phi) {
  const auto* e = m.embedding(user_id);
  double s = m.b;
  for (std::size_t i = 0; i < m.dim; ++i) s += (m.w[i] + (e ? (*e)[i] : 0.0)) * phi[i];
  return s;
}

inline double score(const PrmuModel& m, const PrmuInput& x) { return score(m, x.user_id, featurize(x, m.dim)); }

inline double prmu_reward(const PrmuModel& m, const PrmuInput& x) { return sigmoid(score(m, x)); }

enum class PreferenceSource { PRP, PQP };

inline std::string_view to_string(PreferenceSource s) { return s == PreferenceSource::PRP ? "PRP" : "PQP"; }

struct PreferencePair {
  std::string user_id;
  std::string query;
  std::vector<ProfileEntry> profile;
  OracleResponse preferred;
  OracleResponse rejected;
  PreferenceSource source = PreferenceSource::PRP;
};

/// A pair with both sides already featurized.
struct FeaturizedPair {
  std::string user_id;
  FeatureVector preferred;
  FeatureVector rejected;
};

inline FeaturizedPair featurize_pair(const PreferencePair& p, std::size_t dim = kDefaultFeatureDim) {
  return {p.user_id, featurize(p.user_id, p.query, p.profile, p.preferred.chain, p.preferred.answer, dim),
          featurize(p.user_id, p.query, p.profile, p.rejected.chain, p.rejected.answer, dim)};
}

inline std::vector<FeaturizedPair> featurize_pairs(const std::vector<PreferencePair>& pairs,
                                                   std::size_t dim = kDefaultFeatureDim) {
  std::vector<FeaturizedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(featurize_pair(p, dim));
  return out;
}

inline double score_gap(const PrmuModel& m, const FeaturizedPair& p) {
  return score(m, p.user_id, p.preferred) - score(m, p.user_id, p.rejected);
}

/// Mean of -log sigmoid(score(x+) - score(x-)).
inline double bt_loss(const PrmuModel& m, const std::vector<FeaturizedPair>& batch) {
  if (batch.empty()) throw std::invalid_argument("bt_loss: empty batch");
  double total = 0.0;
  for (const auto& p : batch) total += softplus(-score_gap(m, p));
  return total / static_cast<double>(batch.size());
}

inline double bt_loss(const PrmuModel& m, const std::vector<PreferencePair>& batch) {
  return bt_loss(m, featurize_pairs(batch, m.dim));
}

struct PrmuGradient {
  std::vector<double> w;
  double b = 0.0;  // the bias cancels in every gap, so this stays 0
  std::map<std::string, std::vector<double>, std::less<>> users;
};

inline PrmuGradient bt_grad(const PrmuModel& m, const std::vector<FeaturizedPair>& batch) {
  if (batch.empty()) throw std::invalid_argument("bt_grad: empty batch");
  PrmuGradient g;
  g.w.assign(m.dim, 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& p : batch) {
    // d/d(gap) softplus(-gap) = -sigmoid(-gap)
    const double coef = -sigmoid(-score_gap(m, p)) * inv_n;
    auto& gu = g.users.try_emplace(p.user_id, std::vector<double>(m.dim, 0.0)).first->second;
    for (std::size_t i = 0; i < m.dim; ++i) {
      const double d = coef * (p.preferred[i] - p.rejected[i]);
      g.w[i] += d;
      gu[i] += d;
    }
  }
  return g;
}

inline PrmuGradient bt_grad(const PrmuModel& m, const std::vector<PreferencePair>& batch) {
  return bt_grad(m, featurize_pairs(batch, m.dim));
}

/// Fraction of pairs ranked correctly; ties count one half.
inline double pairwise_accuracy(const PrmuModel& m, const std::vector<FeaturizedPair>& pairs) {
  if (pairs.empty()) return 0.0;
  double hits = 0.0;
  for (const auto& p : pairs) {
    const double gap = score_gap(m, p);
    hits += gap > 0.0 ? 1.0 : (gap == 0.0 ? 0.5 : 0.0);
  }
  return hits / static_cast<double>(pairs.size());
}

struct PrmuTrainConfig {
  double lr = 0.5;
  int epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

struct PrmuTrainResult {
  PrmuModel model;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

/// Mini-batch gradient descent with seeded shuffling.
inline PrmuTrainResult train_prmu(PrmuModel model, const std::vector<FeaturizedPair>& data,
                                  const PrmuTrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_prmu: empty dataset");
  if (cfg.batch_size == 0) throw std::invalid_argument("train_prmu: batch_size must be positive");
  PrmuTrainResult res;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<FeaturizedPair> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x70726D75, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(data[order[i]]);
      loss_sum += bt_loss(model, batch);
      ++batches;
      const auto g = bt_grad(model, batch);
      for (std::size_t i = 0; i < model.dim; ++i) model.w[i] -= cfg.lr * g.w[i];
      model.b -= cfg.lr * g.b;
      for (const auto& [uid, gu] : g.users) {
        auto& e = model.embedding_mut(uid);
        for (std::size_t i = 0; i < model.dim; ++i) e[i] -= cfg.lr * gu[i];
      }
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  res.model = std::move(model);
  return res;
}

inline PrmuTrainResult train_prmu(PrmuModel model, const std::vector<PreferencePair>& data, const PrmuTrainConfig& cfg) {
  auto featurized = featurize_pairs(data, model.dim);
  return train_prmu(std::move(model), featurized, cfg);
}

// ---------------------------------------------------------------------------
// Preference datasets

/// Response generator: (task, profile visible?, rng) -> response.
using ResponseGenerator = std::function<OracleResponse(const TaskInstance&, bool, Rng&)>;

/// Candidate generator for quality pairs: (task, count, rng) -> responses.
using CandidateGenerator = std::function<std::vector<OracleResponse>(const TaskInstance&, int, Rng&)>;

inline ResponseGenerator oracle_generator(const SynthEnv& env) {
  return [&env](const TaskInstance& t, bool show, Rng&) { return env.oracle_responder(t, show); };
}

/// Personalized candidates whose answers are corrupted with probability
/// `1 - p_correct` (wrong class, or one substituted token for generation).
inline CandidateGenerator noisy_oracle_generator(const SynthEnv& env, double p_correct = 0.5) {
  return [&env, p_correct](const TaskInstance& t, int count, Rng& rng) {
    std::vector<OracleResponse> out;
    const int k = env.config().num_classes;
    for (int i = 0; i < count; ++i) {
      TaskInstance noisy = t;
      if (uniform01(rng) >= p_correct) {
        if (t.kind == TaskKind::classification) {
          const int shift = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(k - 1));
          noisy.gold_label = (t.gold_label + shift) % k;
          noisy.gold = class_symbol(noisy.gold_label);
        } else {
          auto toks = symbolize(t.gold);
          const auto pos = rng() % toks.size();
          toks[pos] = content_symbol(static_cast<int>(rng() % static_cast<std::uint64_t>(env.config().content_vocab)));
          noisy.gold = render_symbols(toks);
        }
      }
      out.push_back(env.oracle_responder(noisy, true));
    }
    return out;
  };
}

/// Profile-visible response preferred over the profile-hidden one.
inline std::vector<PreferencePair> build_prp_dataset(const SynthEnv& env, const ResponseGenerator& generator,
                                                     std::size_t n, std::uint64_t stream = 101) {
  std::vector<PreferencePair> out;
  out.reserve(n);
  const auto tasks = env.make_tasks(n, stream);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    Rng rng(derive_seed(env.config().seed, stream, i));
    PreferencePair p{t.user_id, t.query, t.profile_entries(), generator(t, true, rng), generator(t, false, rng),
                     PreferenceSource::PRP};
    if (p.preferred.chain == p.rejected.chain && p.preferred.answer == p.rejected.answer) continue;
    out.push_back(std::move(p));
  }
  return out;
}

inline double candidate_quality(const TaskInstance& t, const OracleResponse& r) {
  return verifiable_reward(t.kind, r.answer, t.gold);
}

/// Best vs worst of `candidates` personalized responses by correctness or
/// ROUGE-1; ties are discarded. Draws tasks until n pairs or 20n attempts.
inline std::vector<PreferencePair> build_pqp_dataset(const SynthEnv& env, const CandidateGenerator& generator,
                                                     std::size_t n, int candidates = 4, std::uint64_t stream = 202) {
  if (candidates < 2) throw std::invalid_argument("build_pqp_dataset: need at least 2 candidates");
  std::vector<PreferencePair> out;
  out.reserve(n);
  const std::size_t max_attempts = 20 * n;
  for (std::size_t attempt = 0; out.size() < n && attempt < max_attempts; attempt += 64) {
    const auto tasks = env.make_tasks(64, stream + (attempt / 64) * 7919);
    for (std::size_t i = 0; i < tasks.size() && out.size() < n; ++i) {
      const auto& t = tasks[i];
      Rng rng(derive_seed(env.config().seed, stream ^ attempt, i));
      const auto cands = generator(t, candidates, rng);
      std::size_t best = 0, worst = 0;
      for (std::size_t c = 1; c < cands.size(); ++c) {
        if (candidate_quality(t, cands[c]) > candidate_quality(t, cands[best])) best = c;
        if (candidate_quality(t, cands[c]) < candidate_quality(t, cands[worst])) worst = c;
      }
      if (!(candidate_quality(t, cands[best]) > candidate_quality(t, cands[worst]))) continue;
      out.push_back({t.user_id, t.query, t.profile_entries(), cands[best], cands[worst], PreferenceSource::PQP});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const PrmuModel& m) {
  nlohmann::json users = nlohmann::json::object();
  for (const auto& [id, e] : m.users) users[id] = e;
  return {{"format", "tagpr-prmu"}, {"version", 1}, {"dim", m.dim}, {"w", m.w}, {"b", m.b}, {"users", users}};
}

inline PrmuModel prmu_from_json(const nlohmann::json& j) {
  if (j.at("format") != "tagpr-prmu" || j.at("version") != 1) throw std::runtime_error("not a tagpr-prmu v1 checkpoint");
  PrmuModel m(j.at("dim").get<std::size_t>());
  m.w = j.at("w").get<std::vector<double>>();
  m.b = j.at("b");
  for (const auto& [id, e] : j.at("users").items()) m.users[id] = e.get<std::vector<double>>();
  if (m.w.size() != m.dim) throw std::runtime_error("prmu checkpoint: weight size mismatch");
  for (const auto& [id, e] : m.users) {
    if (e.size() != m.dim) throw std::runtime_error("prmu checkpoint: embedding size mismatch for " + id);
  }
  return m;
}

inline nlohmann::json to_json(const PreferencePair& p) {
  nlohmann::json profile = nlohmann::json::array();
  for (const auto& e : p.profile) profile.push_back({{"query", e.query}, {"response", e.response}});
  return {{"user_id", p.user_id},
          {"query", p.query},
          {"profile", profile},
          {"preferred", {{"chain", p.preferred.chain}, {"answer", p.preferred.answer}}},
          {"rejected", {{"chain", p.rejected.chain}, {"answer", p.rejected.answer}}},
          {"source", to_string(p.source)}};
}

inline PreferencePair preference_pair_from_json(const nlohmann::json& j) {
  PreferencePair p;
  p.user_id = j.at("user_id");
  p.query = j.at("query");
  for (const auto& e : j.at("profile")) p.profile.push_back({e.at("query"), e.at("response")});
  p.preferred = {j.at("preferred").at("chain"), j.at("preferred").at("answer")};
  p.rejected = {j.at("rejected").at("chain"), j.at("rejected").at("answer")};
  const auto src = j.at("source").get<std::string>();
  if (src != "PRP" && src != "PQP") throw std::runtime_error("preference pair: unknown source " + src);
  p.source = src == "PRP" ? PreferenceSource::PRP : PreferenceSource::PQP;
  return p;
}

}  // namespace tagpr
