#pragma once

// Run configuration: one JSON tree with a named key for every
// hyperparameter. Defaults are the full-scale values; a desk-scale file
// overrides what it needs. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tagpr/pipeline.hpp"
#include "tagpr/prmu.hpp"
#include "tagpr/reward.hpp"
#include "tagpr/synth_env.hpp"
#include "tagpr/training.hpp"

namespace tagpr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PrmuSettings {
  std::size_t dim = kDefaultFeatureDim;
  PrmuTrainConfig train;
  std::size_t prp_pairs = 10000;
  std::size_t pqp_pairs = 10000;
  int pqp_candidates = 4;
};

struct SftSettings {
  std::size_t examples = 500;
  SftConfig train;
};

struct RlSettings {
  GspoConfig gspo;
  std::size_t prompts = 1024;
  int guided_epochs = 13;
  int exploratory_epochs = 2;
};

struct EvalSettings {
  std::size_t tasks = 2000;
  double temperature = 1.0;
  std::uint64_t seed = 99;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::filesystem::path run_dir = "runs/default";
  TagRegistry registry = TagRegistry::defaults();
  RewardWeights weights;
  RepetitionConfig repetition;
  FormatMarkers markers;
  EnvConfig env;
  PrmuSettings prmu;
  SftSettings sft;
  RlSettings rl;
  PipelineConfig pipeline;
  EvalSettings eval;
  nlohmann::json source = nlohmann::json::object();  // the file as loaded

  [[nodiscard]] RewardContext reward_context() const {
    RewardContext ctx;
    ctx.registry = registry;
    ctx.weights = weights;
    ctx.repetition = repetition;
    ctx.markers = markers;
    return ctx;
  }
};

namespace detail {

/// Reads keys from one JSON object, remembering which were consumed so the
/// rest can be reported as unknown.
class KeyReader {
 public:
  KeyReader(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  KeyReader child(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    auto it = obj_.find(key);
    return KeyReader(it == obj_.end() ? empty : *it, path_ + "." + key);
  }

  [[nodiscard]] bool has(const char* key) const { return obj_.contains(key); }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown configuration key " + path_ + "." + k);
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  c.source = j;
  detail::KeyReader root(j, "$");
  root.get("seed", c.seed);
  std::string run_dir = c.run_dir.string();
  root.get("run_dir", run_dir);
  c.run_dir = run_dir;

  {
    auto r = root.child("registry");
    auto names = c.registry.names();
    int min_count = c.registry.min_tag_count();
    r.get("names", names);
    r.get("min_tag_count", min_count);
    r.finish();
    try {
      c.registry = TagRegistry(names, min_count);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  {
    auto r = root.child("reward");
    r.get("alpha", c.weights.alpha);
    r.get("beta", c.weights.beta);
    r.get("gamma", c.weights.gamma);
    r.get("think_open", c.markers.open);
    r.get("think_close", c.markers.close);
    r.finish();
    if (c.weights.alpha < 0 || c.weights.beta < 0 || c.weights.gamma < 0) throw ConfigError("reward weights must be nonnegative");
  }
  {
    auto r = root.child("repetition");
    r.get("n", c.repetition.n);
    r.get("delta", c.repetition.delta);
    r.finish();
    if (c.repetition.n < 1 || !(c.repetition.delta > 0)) throw ConfigError("repetition: need n >= 1 and delta > 0");
  }
  {
    auto r = root.child("env");
    r.get("num_classes", c.env.num_classes);
    r.get("item_dim", c.env.item_dim);
    r.get("content_vocab", c.env.content_vocab);
    r.get("prototype_scale", c.env.prototype_scale);
    r.get("user_offset_scale", c.env.user_offset_scale);
    r.get("num_users", c.env.num_users);
    r.get("history_len", c.env.history_len);
    r.get("profile_k", c.env.profile_k);
    std::string retrieval(to_string(c.env.retrieval));
    r.get("retrieval", retrieval);
    r.get("generation_fraction", c.env.generation_fraction);
    r.finish();
    try {
      c.env.retrieval = retrieval_from_string(retrieval);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  c.env.seed = c.seed;
  {
    auto r = root.child("prmu");
    r.get("dim", c.prmu.dim);
    r.get("lr", c.prmu.train.lr);
    r.get("epochs", c.prmu.train.epochs);
    r.get("batch_size", c.prmu.train.batch_size);
    r.get("prp_pairs", c.prmu.prp_pairs);
    r.get("pqp_pairs", c.prmu.pqp_pairs);
    r.get("pqp_candidates", c.prmu.pqp_candidates);
    r.finish();
    if (c.prmu.dim == 0 || c.prmu.train.batch_size == 0) throw ConfigError("prmu: dim and batch_size must be positive");
  }
  c.prmu.train.seed = derive_seed(c.seed, 0x70726D75);
  {
    auto r = root.child("sft");
    r.get("examples", c.sft.examples);
    r.get("epochs", c.sft.train.epochs);
    r.get("lr", c.sft.train.lr);
    r.get("batch_size", c.sft.train.batch_size);
    r.finish();
    if (c.sft.examples == 0 || c.sft.train.batch_size == 0) throw ConfigError("sft: examples and batch_size must be positive");
  }
  c.sft.train.seed = derive_seed(c.seed, 0x736674);
  {
    auto r = root.child("rl");
    auto& g = c.rl.gspo;
    r.get("group_size", g.group_size);
    r.get("eps_low", g.clip.eps_low);
    r.get("eps_high", g.clip.eps_high);
    r.get("temperature", g.temperature);
    r.get("top_p", g.top_p);
    r.get("lr", g.lr);
    r.get("batch_size", g.batch_size);
    r.get("max_len", g.max_len);
    r.get("eps_std", g.eps_std);
    r.get("inner_steps", g.inner_steps);
    r.get("prompts", c.rl.prompts);
    r.get("guided_epochs", c.rl.guided_epochs);
    r.get("exploratory_epochs", c.rl.exploratory_epochs);
    r.finish();
    try {
      g.check();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  c.rl.gspo.seed = derive_seed(c.seed, 0x67737070);
  {
    auto r = root.child("pipeline");
    auto& p = c.pipeline;
    r.get("instances_per_task", p.instances_per_task);
    r.get("rollouts_per_instance", p.rollouts_per_instance);
    r.get("rouge_threshold", p.rouge_threshold);
    r.get("judge_threshold", p.judge_threshold);
    r.get("k_clusters", p.k_clusters);
    r.get("temperature", p.temperature);
    r.get("parallelism", p.parallelism);
    r.get("sample_report_size", p.sample_report_size);
    r.get("retry_attempts", p.retry.attempts);
    int backoff_ms = static_cast<int>(p.retry.initial_backoff.count());
    r.get("retry_backoff_ms", backoff_ms);
    p.retry.initial_backoff = std::chrono::milliseconds(backoff_ms);
    r.finish();
    p.min_tag_count = c.registry.min_tag_count();
    p.seed = derive_seed(c.seed, 0x7069706C);
    try {
      p.check();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  {
    auto r = root.child("eval");
    r.get("tasks", c.eval.tasks);
    r.get("temperature", c.eval.temperature);
    r.finish();
  }
  c.eval.seed = derive_seed(c.seed, 0x6576616C);
  root.finish();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const auto j = nlohmann::json::parse(ss.str(), nullptr, false, /*ignore_comments=*/true);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return parse_run_config(j);
}

}  // namespace tagpr
