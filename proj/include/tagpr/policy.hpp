#pragma once

// Toy autoregressive policy: a linear softmax over a symbol vocabulary,
// conditioned on the last two symbols and on prompt features. Supports
// supervised fine-tuning on tagged chains and sequence-level clipped
// policy optimization (GSPO) on group-standardized rewards.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tagpr/random.hpp"
#include "tagpr/symbols.hpp"
#include "tagpr/synth_env.hpp"
#include "tagpr/tag_grammar.hpp"

namespace tagpr {

class Vocabulary {
 public:
  static constexpr std::string_view kEos = "<eos>";

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (!index_.emplace(symbols_[i], static_cast<int>(i)).second) {
        throw std::invalid_argument("Vocabulary: duplicate symbol " + symbols_[i]);
      }
    }
    eos_ = require(kEos);
  }

  /// think markers, open/close per registered tag, content, item and class
  /// symbols, then the end symbol.
  static Vocabulary build(const TagRegistry& registry, const EnvConfig& env, const FormatMarkers& markers = {}) {
    std::vector<std::string> s{markers.open, markers.close};
    for (const auto& t : registry.names()) {
      s.push_back("<" + t + ">");
      s.push_back("</" + t + ">");
    }
    for (int i = 0; i < env.content_vocab; ++i) s.push_back(content_symbol(i));
    for (int d = 0; d < env.item_dim; ++d) {
      s.push_back(item_symbol(d, true));
      s.push_back(item_symbol(d, false));
    }
    for (int c = 0; c < env.num_classes; ++c) s.push_back(class_symbol(c));
    s.emplace_back(kEos);
    return Vocabulary(std::move(s));
  }

  [[nodiscard]] std::size_t size() const { return symbols_.size(); }
  [[nodiscard]] const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }
  [[nodiscard]] const std::vector<std::string>& symbols() const { return symbols_; }
  [[nodiscard]] int eos() const { return eos_; }

  [[nodiscard]] std::optional<int> find(std::string_view s) const {
    auto it = index_.find(std::string(s));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  [[nodiscard]] int require(std::string_view s) const {
    auto id = find(s);
    if (!id) throw std::invalid_argument("symbol '" + std::string(s) + "' is not in the vocabulary");
    return *id;
  }

  /// Symbol ids of `text`; throws std::invalid_argument on out-of-vocabulary symbols.
  [[nodiscard]] std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& s : symbolize(text)) out.push_back(require(s));
    return out;
  }

  /// Text of `ids`, skipping the end symbol.
  [[nodiscard]] std::string render(std::span<const int> ids) const {
    std::vector<std::string> s;
    for (int id : ids) {
      if (id != eos_) s.push_back(symbol(id));
    }
    return render_symbols(s);
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, int> index_;
  int eos_ = -1;
};

/// Prompt as seen by the policy: dense features plus the bookkeeping the
/// reward needs.
struct PolicyPrompt {
  std::vector<double> features;
  const TaskInstance* task = nullptr;
};

inline constexpr std::size_t kPromptHashDim = 16;

/// Prompt features: the query item, per-class profile similarity
/// sum_{j: y_j=c} x_j.x / k, per-class profile label frequency, the label of
/// the most similar profile item (one-hot), a bag of profile content symbols,
/// and a hashed bag of query and profile tokens.
inline std::vector<double> prompt_features(const SynthEnv& env, const TaskInstance& t) {
  const auto& cfg = env.config();
  const auto dim = static_cast<std::size_t>(cfg.item_dim);
  const auto k = static_cast<std::size_t>(cfg.num_classes);
  const auto m = static_cast<std::size_t>(cfg.content_vocab);
  std::vector<double> f(dim + 3 * k + m + kPromptHashDim, 0.0);
  for (std::size_t d = 0; d < dim; ++d) f[d] = t.item[d];
  const double inv_k = t.profile.empty() ? 0.0 : 1.0 / static_cast<double>(t.profile.size());
  double best_sim = -INFINITY;
  int best_label = -1;
  std::size_t content_count = 0;
  for (const auto& p : t.profile) {
    if (p.label >= 0) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += p.item[d] * t.item[d];
      f[dim + static_cast<std::size_t>(p.label)] += dot * inv_k;
      f[dim + k + static_cast<std::size_t>(p.label)] += inv_k;
      const double sim = SynthEnv::cosine(p.item, t.item);
      if (sim > best_sim) {
        best_sim = sim;
        best_label = p.label;
      }
    }
    if (t.kind == TaskKind::generation) {
      for (const auto& s : symbolize(p.entry.response)) {
        if (s.size() > 1 && s[0] == 'w') {
          const auto idx = static_cast<std::size_t>(std::stoi(s.substr(1)));
          if (idx < m) {
            f[dim + 3 * k + idx] += 1.0;
            ++content_count;
          }
        }
      }
    }
  }
  if (best_label >= 0) f[dim + 2 * k + static_cast<std::size_t>(best_label)] = 1.0;
  if (content_count > 0) {
    for (std::size_t i = 0; i < m; ++i) f[dim + 3 * k + i] /= static_cast<double>(content_count);
  }
  const std::size_t hash_base = dim + 3 * k + m;
  std::vector<std::string> toks = tokenize(t.query);
  for (const auto& p : t.profile) {
    for (auto& s : tokenize(p.entry.query)) toks.push_back("p:" + s);
    for (auto& s : tokenize(p.entry.response)) toks.push_back("r:" + s);
  }
  double norm = 0.0;
  std::vector<double> h(kPromptHashDim, 0.0);
  for (const auto& s : toks) h[fnv1a(s) % kPromptHashDim] += 1.0;
  for (double v : h) norm += v * v;
  norm = std::sqrt(norm);
  for (std::size_t i = 0; i < kPromptHashDim; ++i) f[hash_base + i] = norm > 0.0 ? h[i] / norm : 0.0;
  return f;
}

inline std::size_t prompt_feature_dim(const EnvConfig& cfg) {
  return static_cast<std::size_t>(cfg.item_dim + 3 * cfg.num_classes + cfg.content_vocab) + kPromptHashDim;
}

using SparseFeatures = std::vector<std::pair<std::size_t, double>>;

/// Layout of the context vector for a vocabulary of size V and prompt
/// dimension P:
///   [0, V+1)          one-hot of the previous symbol (V = begin-of-sequence)
///   [V+1, 2V+2)       one-hot of the symbol before that
///   2V+2              bias
///   next P            prompt features while reasoning
///   next P            prompt features once the think block is closed
struct ContextLayout {
  std::size_t vocab = 0;
  std::size_t prompt = 0;
  static constexpr int kWindow = 2;

  [[nodiscard]] std::size_t dim() const { return 2 * (vocab + 1) + 1 + 2 * prompt; }
};

struct PolicyParams {
  Vocabulary vocab;
  ContextLayout layout;
  int think_close = -1;
  std::vector<double> theta;  // row-major [vocab][context dim]

  PolicyParams() = default;
  PolicyParams(Vocabulary v, std::size_t prompt_dim, const FormatMarkers& markers = {})
      : vocab(std::move(v)), layout{vocab.size(), prompt_dim}, think_close(vocab.require(markers.close)),
        theta(vocab.size() * layout.dim(), 0.0) {}

  [[nodiscard]] std::size_t rows() const { return layout.vocab; }
  [[nodiscard]] std::size_t cols() const { return layout.dim(); }
  double& at(std::size_t r, std::size_t c) { return theta[r * cols() + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return theta[r * cols() + c]; }

  [[nodiscard]] bool finite() const {
    return std::all_of(theta.begin(), theta.end(), [](double x) { return std::isfinite(x); });
  }
};

inline SparseFeatures context_features_sparse(const PolicyParams& params, std::span<const int> prefix,
                                              const PolicyPrompt& prompt) {
  const auto& L = params.layout;
  SparseFeatures f;
  f.reserve(3 + prompt.features.size());
  const std::size_t n = prefix.size();
  const std::size_t prev1 = n >= 1 ? static_cast<std::size_t>(prefix[n - 1]) : L.vocab;
  const std::size_t prev2 = n >= 2 ? static_cast<std::size_t>(prefix[n - 2]) : L.vocab;
  f.emplace_back(prev1, 1.0);
  f.emplace_back(L.vocab + 1 + prev2, 1.0);
  f.emplace_back(2 * (L.vocab + 1), 1.0);
  const bool answering = std::find(prefix.begin(), prefix.end(), params.think_close) != prefix.end();
  const std::size_t base = 2 * (L.vocab + 1) + 1 + (answering ? L.prompt : 0);
  for (std::size_t i = 0; i < prompt.features.size(); ++i) {
    if (prompt.features[i] != 0.0) f.emplace_back(base + i, prompt.features[i]);
  }
  return f;
}

inline std::vector<double> context_features(const PolicyParams& params, std::span<const int> prefix,
                                            const PolicyPrompt& prompt) {
  std::vector<double> dense(params.layout.dim(), 0.0);
  for (const auto& [i, v] : context_features_sparse(params, prefix, prompt)) dense[i] += v;
  return dense;
}

/// Softmax of logits / temperature at the next position.
inline std::vector<double> next_distribution(const PolicyParams& params, const SparseFeatures& f, double temperature) {
  std::vector<double> z(params.rows(), 0.0);
  for (std::size_t r = 0; r < params.rows(); ++r) {
    double s = 0.0;
    const double* row = params.theta.data() + r * params.cols();
    for (const auto& [i, v] : f) s += row[i] * v;
    z[r] = s / temperature;
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : z) v /= sum;
  return z;
}

struct Rollout {
  std::vector<int> tokens;
  double logprob_old = 0.0;
  double reward = 0.0;
  std::string rendered_text;
};

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  int max_len = 32;
};

/// Autoregressive sampling. temperature <= 0 decodes greedily. The stored
/// log-likelihood always comes from the untruncated distribution.
inline Rollout sample_sequence(const PolicyParams& params, const PolicyPrompt& prompt, const SamplingConfig& cfg,
                               Rng& rng) {
  Rollout r;
  const bool greedy = cfg.temperature <= 0.0;
  const double temp = greedy ? 1.0 : cfg.temperature;
  if (cfg.top_p < 1.0) {
    static bool warned = false;
    if (!warned) {
      std::clog << "warning: top_p < 1; stored log-likelihoods use the untruncated distribution\n";
      warned = true;
    }
  }
  for (int step = 0; step < cfg.max_len; ++step) {
    const auto p = next_distribution(params, context_features_sparse(params, r.tokens, prompt), temp);
    int choice = 0;
    if (greedy) {
      choice = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    } else {
      std::vector<std::size_t> order(p.size());
      std::iota(order.begin(), order.end(), 0);
      double mass = 1.0;
      if (cfg.top_p < 1.0) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
        double acc = 0.0;
        std::size_t keep = 0;
        while (keep < order.size() && acc < cfg.top_p) acc += p[order[keep++]];
        order.resize(keep);
        mass = acc;
      }
      double u = uniform01(rng) * mass;
      choice = static_cast<int>(order.back());
      for (auto idx : order) {
        u -= p[idx];
        if (u < 0.0) {
          choice = static_cast<int>(idx);
          break;
        }
      }
    }
    r.logprob_old += std::log(p[static_cast<std::size_t>(choice)]);
    r.tokens.push_back(choice);
    if (choice == params.vocab.eos()) break;
  }
  r.rendered_text = params.vocab.render(r.tokens);
  return r;
}

inline double sequence_logprob(const PolicyParams& params, std::span<const int> tokens, const PolicyPrompt& prompt,
                               double temperature = 1.0) {
  double lp = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto p = next_distribution(params, context_features_sparse(params, tokens.first(t), prompt), temperature);
    lp += std::log(p[static_cast<std::size_t>(tokens[t])]);
  }
  return lp;
}

/// Adds scale * d/dtheta log pi(tokens) into `grad`; returns log pi(tokens).
inline double accumulate_logprob_grad(const PolicyParams& params, std::span<const int> tokens,
                                      const PolicyPrompt& prompt, double temperature, double scale,
                                      std::vector<double>& grad) {
  double lp = 0.0;
  const std::size_t cols = params.cols();
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto f = context_features_sparse(params, tokens.first(t), prompt);
    const auto p = next_distribution(params, f, temperature);
    const auto a = static_cast<std::size_t>(tokens[t]);
    lp += std::log(p[a]);
    if (scale == 0.0) continue;
    for (std::size_t r = 0; r < params.rows(); ++r) {
      const double coef = scale * ((r == a ? 1.0 : 0.0) - p[r]) / temperature;
      if (coef == 0.0) continue;
      double* row = grad.data() + r * cols;
      for (const auto& [i, v] : f) row[i] += coef * v;
    }
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning

struct SftExample {
  PolicyPrompt prompt;
  std::vector<int> target;  // ends with the end symbol
};

/// Target ids for a tagged chain and answer, terminated by the end symbol.
inline std::vector<int> encode_target(const Vocabulary& vocab, const OracleResponse& r,
                                      const FormatMarkers& markers = {}) {
  auto ids = vocab.encode(r.text(markers));
  ids.push_back(vocab.eos());
  return ids;
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean negative log-likelihood of the batch and its gradient.
inline LossAndGrad sft_loss_and_grad(const PolicyParams& params, std::span<const SftExample> batch) {
  if (batch.empty()) throw std::invalid_argument("sft: empty batch");
  LossAndGrad out;
  out.grad.assign(params.theta.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    out.loss -= inv_n * accumulate_logprob_grad(params, ex.target, ex.prompt, 1.0, -inv_n, out.grad);
  }
  return out;
}

/// One gradient-descent step on the mean NLL; returns the pre-step loss.
inline double sft_step(PolicyParams& params, std::span<const SftExample> batch, double lr) {
  const auto lg = sft_loss_and_grad(params, batch);
  for (std::size_t i = 0; i < params.theta.size(); ++i) params.theta[i] -= lr * lg.grad[i];
  return lg.loss;
}

// ---------------------------------------------------------------------------
// Group-standardized advantages and the GSPO objective

/// (R_i - mean) / std_pop, or all zeros when std_pop < eps_std.
inline std::vector<double> standardize_advantages(std::span<const double> rewards, double eps_std = 1e-8) {
  if (rewards.size() < 2) throw std::invalid_argument("standardize_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd < eps_std) return a;
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

/// Length-normalized sequence likelihood ratio exp((log pi - log pi_old) / |y|).
inline double gspo_ratio_from_logprobs(double logprob, double logprob_old, std::size_t length) {
  if (length == 0) throw std::invalid_argument("gspo_ratio: empty sequence");
  return std::exp((logprob - logprob_old) / static_cast<double>(length));
}

inline double gspo_ratio(const PolicyParams& params, const PolicyParams& params_old, const Rollout& rollout,
                         const PolicyPrompt& prompt, double temperature = 1.0) {
  return gspo_ratio_from_logprobs(sequence_logprob(params, rollout.tokens, prompt, temperature),
                                  sequence_logprob(params_old, rollout.tokens, prompt, temperature),
                                  rollout.tokens.size());
}

struct ClipRange {
  double eps_low = 0.0003;
  double eps_high = 0.0004;
};

/// min(s A, clip(s, 1 - eps_low, 1 + eps_high) A) and whether the unclipped
/// branch is the one selected (ties select it).
inline std::pair<double, bool> clipped_surrogate(double ratio, double advantage, const ClipRange& clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
  const double a = ratio * advantage;
  const double b = clipped * advantage;
  return a <= b ? std::pair{a, true} : std::pair{b, false};
}

struct RolloutGroup {
  PolicyPrompt prompt;
  std::vector<Rollout> rollouts;
  std::vector<double> advantages;
  std::vector<double> ratios;
};

struct ObjectiveAndGrad {
  double objective = 0.0;
  std::vector<double> grad;
};

/// Mean over groups of the group-mean clipped surrogate; fills each group's
/// ratios. The gradient differentiates whichever branch min() selected.
inline ObjectiveAndGrad gspo_objective(const PolicyParams& params, std::vector<RolloutGroup>& groups,
                                       const ClipRange& clip, double temperature = 1.0) {
  if (groups.empty()) throw std::invalid_argument("gspo_objective: no groups");
  ObjectiveAndGrad out;
  out.grad.assign(params.theta.size(), 0.0);
  const double inv_groups = 1.0 / static_cast<double>(groups.size());
  std::vector<double> seq_grad(params.theta.size());
  for (auto& g : groups) {
    const double inv_g = 1.0 / static_cast<double>(g.rollouts.size());
    g.ratios.assign(g.rollouts.size(), 1.0);
    for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
      const auto& r = g.rollouts[i];
      const double adv = g.advantages[i];
      std::fill(seq_grad.begin(), seq_grad.end(), 0.0);
      const double lp = accumulate_logprob_grad(params, r.tokens, g.prompt, temperature, adv == 0.0 ? 0.0 : 1.0, seq_grad);
      const double len = static_cast<double>(r.tokens.size());
      const double s = gspo_ratio_from_logprobs(lp, r.logprob_old, r.tokens.size());
      g.ratios[i] = s;
      const auto [value, unclipped] = clipped_surrogate(s, adv, clip);
      out.objective += inv_groups * inv_g * value;
      if (!unclipped || adv == 0.0) continue;
      // d s / d theta = s * grad log pi / |y|
      const double coef = inv_groups * inv_g * adv * s / len;
      for (std::size_t k = 0; k < seq_grad.size(); ++k) out.grad[k] += coef * seq_grad[k];
    }
  }
  return out;
}

/// Same as gspo_objective but against an explicit old policy: recomputes
/// each rollout's old log-likelihood from `params_old` first.
inline ObjectiveAndGrad gspo_objective(const PolicyParams& params, const PolicyParams& params_old,
                                       std::vector<RolloutGroup>& groups, const ClipRange& clip,
                                       double temperature = 1.0) {
  for (auto& g : groups) {
    for (auto& r : g.rollouts) r.logprob_old = sequence_logprob(params_old, r.tokens, g.prompt, temperature);
  }
  return gspo_objective(params, groups, clip, temperature);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const PolicyParams& p, std::string_view stage) {
  return {{"format", "tagpr-policy"},
          {"version", 1},
          {"stage", stage},
          {"vocab", p.vocab.symbols()},
          {"prompt_dim", p.layout.prompt},
          {"theta", p.theta}};
}

inline PolicyParams policy_from_json(const nlohmann::json& j, const FormatMarkers& markers = {}) {
  if (j.at("format") != "tagpr-policy" || j.at("version") != 1) {
    throw std::runtime_error("not a tagpr-policy v1 checkpoint");
  }
  PolicyParams p(Vocabulary(j.at("vocab").get<std::vector<std::string>>()), j.at("prompt_dim").get<std::size_t>(),
                 markers);
  auto theta = j.at("theta").get<std::vector<double>>();
  if (theta.size() != p.theta.size()) throw std::runtime_error("policy checkpoint: parameter size mismatch");
  p.theta = std::move(theta);
  return p;
}

}  // namespace tagpr
