#pragma once

// SFT and the two reinforcement stages (guided: composite reward,
// exploratory: foundation reward) for the toy policy.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tagpr/policy.hpp"
#include "tagpr/prmu.hpp"
#include "tagpr/reward.hpp"
#include "tagpr/synth_env.hpp"

namespace tagpr {

enum class RlStage { guided, exploratory };

inline std::string_view to_string(RlStage s) { return s == RlStage::guided ? "rl-guided" : "rl-explore"; }

/// Tokens in the reasoning part of a response.
inline std::size_t chain_length(std::string_view response, const FormatMarkers& markers = {}) {
  return tokenize(split_response(response, markers).reasoning).size();
}

struct SftConfig {
  int epochs = 3;
  double lr = 0.5;
  std::size_t batch_size = 16;
  std::uint64_t seed = 11;
};

inline std::vector<PolicyPrompt> encode_prompts(const SynthEnv& env, const std::vector<TaskInstance>& tasks) {
  std::vector<PolicyPrompt> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) out.push_back({prompt_features(env, t), &t});
  return out;
}

/// Oracle-written (profile visible) chains as SFT targets.
inline std::vector<SftExample> oracle_sft_examples(const SynthEnv& env, const Vocabulary& vocab,
                                                   const std::vector<PolicyPrompt>& prompts,
                                                   const FormatMarkers& markers = {}) {
  std::vector<SftExample> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back({p, encode_target(vocab, env.oracle_responder(*p.task, true), markers)});
  return out;
}

/// Mini-batch SFT with seeded shuffling; returns the mean loss per epoch.
inline std::vector<double> run_sft(PolicyParams& params, const std::vector<SftExample>& data, const SftConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("run_sft: empty dataset");
  std::vector<double> curve;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<SftExample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x736674, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(data[order[i]]);
      sum += sft_step(params, batch, cfg.lr);
      ++n;
      if (!params.finite()) throw std::runtime_error("run_sft: non-finite parameters");
    }
    curve.push_back(sum / static_cast<double>(n));
  }
  return curve;
}

struct GspoConfig {
  int group_size = 5;
  ClipRange clip;
  double temperature = 1.0;
  double top_p = 1.0;
  double lr = 1e-6;
  int epochs = 13;
  std::size_t batch_size = 128;
  int max_len = 32;
  double eps_std = 1e-8;
  int inner_steps = 1;  // gradient steps per sampled batch
  std::uint64_t seed = 23;

  void check() const {
    if (group_size < 2) throw std::invalid_argument("gspo: group_size must be >= 2");
    if (!(clip.eps_low > 0.0 && clip.eps_low < 1.0 && clip.eps_high > 0.0 && clip.eps_high < 1.0)) {
      throw std::invalid_argument("gspo: clip ratios must lie in (0, 1)");
    }
    if (batch_size == 0 || inner_steps < 1 || max_len < 1) throw std::invalid_argument("gspo: invalid schedule");
  }
};

struct MetricsRow {
  std::string stage;
  int epoch = 0;
  int batch = 0;
  double mean_reward = 0.0;
  double tag_compliance = 0.0;
  double mean_len = 0.0;
  double objective = 0.0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "stage,epoch,batch,mean_reward,tag_compliance,mean_len,objective\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g,%.17g,%.17g\n", r.stage.c_str(), r.epoch, r.batch,
                  r.mean_reward, r.tag_compliance, r.mean_len, r.objective);
    out += buf;
  }
  return out;
}

/// Reward context bound to one prompt: the PRMU hook needs the user, query
/// and profile.
inline RewardContext bind_reward_context(const RewardContext& base, const PrmuModel* prmu, const TaskInstance& task) {
  RewardContext ctx = base;
  if (prmu) {
    ctx.prmu = [prmu, &task](std::string_view chain, std::string_view answer) {
      return sigmoid(score(*prmu, task.user_id, featurize(task.user_id, task.query, task.profile_entries(), chain, answer, prmu->dim)));
    };
  }
  return ctx;
}

struct StageResult {
  std::vector<MetricsRow> log;
};

/// One reinforcement stage. Each batch: freeze params_old, sample G
/// rollouts per prompt, score, standardize within groups, then take
/// `inner_steps` gradient-ascent steps on the clipped objective.
inline StageResult train_stage(PolicyParams& params, const std::vector<PolicyPrompt>& prompts, RlStage stage,
                               const RewardContext& reward_base, const PrmuModel* prmu, const GspoConfig& cfg) {
  cfg.check();
  if (stage == RlStage::guided && prmu == nullptr) throw std::invalid_argument("guided stage requires a PRMU model");
  if (prompts.empty()) throw std::invalid_argument("train_stage: no prompts");
  StageResult res;
  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), 0);
  const SamplingConfig sampling{cfg.temperature, cfg.top_p, cfg.max_len};
  const auto stage_tag = static_cast<std::uint64_t>(stage == RlStage::guided ? 1 : 2);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x65706F63 + stage_tag, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<RolloutGroup> groups;
      groups.reserve(stop - start);
      double reward_sum = 0.0, len_sum = 0.0, compliant = 0.0, count = 0.0;
      for (std::size_t bi = start; bi < stop; ++bi) {
        const auto& prompt = prompts[order[bi]];
        const auto ctx = bind_reward_context(reward_base, prmu, *prompt.task);
        RolloutGroup g;
        g.prompt = prompt;
        std::vector<double> rewards;
        for (int i = 0; i < cfg.group_size; ++i) {
          Rng rng(derive_seed(cfg.seed ^ (stage_tag << 56),
                              (static_cast<std::uint64_t>(epoch) << 32) + order[bi], static_cast<std::uint64_t>(i)));
          auto r = sample_sequence(params, prompt, sampling, rng);
          const auto b = score_response(r.rendered_text, prompt.task->kind, prompt.task->gold, ctx);
          r.reward = stage == RlStage::guided ? b.composite : b.foundation;
          rewards.push_back(r.reward);
          reward_sum += r.reward;
          len_sum += static_cast<double>(chain_length(r.rendered_text, ctx.markers));
          compliant += b.r_tag == 0.0 ? 1.0 : 0.0;
          count += 1.0;
          g.rollouts.push_back(std::move(r));
        }
        g.advantages = standardize_advantages(rewards, cfg.eps_std);
        groups.push_back(std::move(g));
      }
      double objective = 0.0;
      for (int step = 0; step < cfg.inner_steps; ++step) {
        const auto og = gspo_objective(params, groups, cfg.clip, cfg.temperature <= 0.0 ? 1.0 : cfg.temperature);
        objective = og.objective;
        for (std::size_t k = 0; k < params.theta.size(); ++k) params.theta[k] += cfg.lr * og.grad[k];
        if (!params.finite()) throw std::runtime_error("train_stage: non-finite parameters");
      }
      res.log.push_back({std::string(to_string(stage)), epoch, batch_index, reward_sum / count, compliant / count,
                         len_sum / count, objective});
    }
  }
  return res;
}

}  // namespace tagpr
