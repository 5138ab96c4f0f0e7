#pragma once

// Evaluation of a responder on held-out tasks and the report bundle:
// task metrics, tag frequencies, chain-length distribution and average
// reward decomposition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tagpr/policy.hpp"
#include "tagpr/prmu.hpp"
#include "tagpr/reward.hpp"
#include "tagpr/synth_env.hpp"
#include "tagpr/training.hpp"

namespace tagpr {

/// Produces a full response text for a task.
using Responder = std::function<std::string(const TaskInstance&, const PolicyPrompt&, Rng&)>;

inline Responder policy_responder(const PolicyParams& params, SamplingConfig sampling) {
  return [&params, sampling](const TaskInstance&, const PolicyPrompt& prompt, Rng& rng) {
    return sample_sequence(params, prompt, sampling, rng).rendered_text;
  };
}

inline Responder oracle_text_responder(const SynthEnv& env, const FormatMarkers& markers = {}) {
  return [&env, markers](const TaskInstance& t, const PolicyPrompt&, Rng&) { return env.oracle_responder(t, true).text(markers); };
}

/// Valid oracle chain with a uniformly random class label as the answer.
inline Responder uniform_responder(const SynthEnv& env, const FormatMarkers& markers = {}) {
  return [&env, markers](const TaskInstance& t, const PolicyPrompt&, Rng& rng) {
    auto r = env.oracle_responder(t, true);
    if (t.kind == TaskKind::classification) {
      r.answer = class_symbol(static_cast<int>(rng() % static_cast<std::uint64_t>(env.config().num_classes)));
    }
    return r.text(markers);
  };
}

struct TaskMetrics {
  std::size_t count = 0;
  std::optional<LabelMetrics> labels;  // classification
  std::optional<double> rouge1;        // generation
  std::optional<double> rougeL;
};

struct LengthReport {
  double mean = 0.0;
  double median = 0.0;
  std::size_t bin_width = 5;
  std::vector<std::size_t> histogram;  // counts per [i*w, (i+1)*w)
};

struct ReportBundle {
  std::string label;
  std::size_t tasks = 0;
  std::map<std::string, TaskMetrics> metrics;  // by task kind
  std::map<std::string, double> tag_frequency;
  LengthReport chain_length;
  RewardBreakdown mean_reward;
  double tag_compliance = 0.0;
};

inline LengthReport length_report(std::vector<std::size_t> lengths, std::size_t bin_width = 5) {
  LengthReport r;
  r.bin_width = bin_width;
  if (lengths.empty()) return r;
  std::sort(lengths.begin(), lengths.end());
  double sum = 0.0;
  for (auto l : lengths) sum += static_cast<double>(l);
  r.mean = sum / static_cast<double>(lengths.size());
  const auto n = lengths.size();
  r.median = n % 2 ? static_cast<double>(lengths[n / 2])
                   : 0.5 * (static_cast<double>(lengths[n / 2 - 1]) + static_cast<double>(lengths[n / 2]));
  r.histogram.assign(lengths.back() / bin_width + 1, 0);
  for (auto l : lengths) ++r.histogram[l / bin_width];
  return r;
}

/// Evaluates `responder` on `tasks`; response i is drawn with an rng
/// seeded from (seed, i).
inline ReportBundle evaluate(const SynthEnv& env, const std::vector<TaskInstance>& tasks, const Responder& responder,
                             const RewardContext& reward_base, const PrmuModel* prmu, std::uint64_t seed,
                             std::string label = "") {
  ReportBundle rb;
  rb.label = std::move(label);
  rb.tasks = tasks.size();
  rb.mean_reward.r_prmu = 0.0;
  std::map<std::string, std::vector<std::string>> preds, golds;
  std::map<std::string, std::pair<double, double>> rouge_sums;
  std::vector<TaggedChain> chains;
  std::vector<std::size_t> lengths;
  double compliant = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    const PolicyPrompt prompt{prompt_features(env, t), &t};
    Rng rng(derive_seed(seed, 0x6576616C, i));
    const auto text = responder(t, prompt, rng);
    const auto ctx = bind_reward_context(reward_base, prmu, t);
    const auto b = score_response(text, t.kind, t.gold, ctx);
    rb.mean_reward.r_v += b.r_v;
    rb.mean_reward.r_f += b.r_f;
    rb.mean_reward.r_rep += b.r_rep;
    rb.mean_reward.r_tag += b.r_tag;
    rb.mean_reward.r_prmu += b.r_prmu;
    rb.mean_reward.composite += b.composite;
    rb.mean_reward.foundation += b.foundation;
    compliant += b.r_tag == 0.0 ? 1.0 : 0.0;
    const auto parts = split_response(text, ctx.markers);
    chains.push_back(parse_chain(parts.reasoning));
    lengths.push_back(tokenize(parts.reasoning).size());
    const std::string kind(to_string(t.kind));
    if (t.kind == TaskKind::classification) {
      preds[kind].push_back(parts.answer);
      golds[kind].push_back(t.gold);
    } else {
      auto& s = rouge_sums[kind];
      s.first += rouge1(parts.answer, t.gold);
      s.second += rougeL(parts.answer, t.gold);
    }
    ++rb.metrics[kind].count;
  }
  if (!tasks.empty()) {
    const double n = static_cast<double>(tasks.size());
    for (double* v : {&rb.mean_reward.r_v, &rb.mean_reward.r_f, &rb.mean_reward.r_rep, &rb.mean_reward.r_tag,
                      &rb.mean_reward.r_prmu, &rb.mean_reward.composite, &rb.mean_reward.foundation}) {
      *v /= n;
    }
    rb.tag_compliance = compliant / n;
  }
  for (auto& [kind, m] : rb.metrics) {
    if (preds.count(kind)) m.labels = classification_metrics(preds[kind], golds[kind]);
    if (rouge_sums.count(kind)) {
      m.rouge1 = rouge_sums[kind].first / static_cast<double>(m.count);
      m.rougeL = rouge_sums[kind].second / static_cast<double>(m.count);
    }
  }
  rb.tag_frequency = tag_histogram(chains);
  rb.chain_length = length_report(std::move(lengths));
  return rb;
}

inline nlohmann::json to_json(const ReportBundle& rb) {
  nlohmann::json metrics = nlohmann::json::object();
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const auto& [kind, m] : rb.metrics) {
    nlohmann::json j = {{"count", m.count}};
    if (m.labels) {
      j["accuracy"] = m.labels->accuracy;
      j["macro_f1"] = m.labels->macro_f1;
      j["mae"] = opt(m.labels->mae);
      j["rmse"] = opt(m.labels->rmse);
    }
    if (m.rouge1) {
      j["rouge1"] = *m.rouge1;
      j["rougeL"] = opt(m.rougeL);
    }
    metrics[kind] = j;
  }
  const auto& r = rb.mean_reward;
  return {{"label", rb.label},
          {"tasks", rb.tasks},
          {"metrics", metrics},
          {"tag_frequency", rb.tag_frequency},
          {"chain_length",
           {{"mean", rb.chain_length.mean},
            {"median", rb.chain_length.median},
            {"bin_width", rb.chain_length.bin_width},
            {"histogram", rb.chain_length.histogram}}},
          {"mean_reward",
           {{"r_v", r.r_v},
            {"r_f", r.r_f},
            {"r_rep", r.r_rep},
            {"r_tag", r.r_tag},
            {"r_prmu", r.r_prmu},
            {"composite", r.composite},
            {"foundation", r.foundation}}},
          {"tag_compliance", rb.tag_compliance}};
}

/// Long-format CSV: section,key,value.
inline std::string to_csv(const ReportBundle& rb) {
  std::ostringstream os;
  os.precision(17);
  os << "section,key,value\n";
  for (const auto& [kind, m] : rb.metrics) {
    os << "metrics," << kind << ".count," << m.count << '\n';
    if (m.labels) {
      os << "metrics," << kind << ".accuracy," << m.labels->accuracy << '\n';
      os << "metrics," << kind << ".macro_f1," << m.labels->macro_f1 << '\n';
      if (m.labels->mae) os << "metrics," << kind << ".mae," << *m.labels->mae << '\n';
      if (m.labels->rmse) os << "metrics," << kind << ".rmse," << *m.labels->rmse << '\n';
    }
    if (m.rouge1) os << "metrics," << kind << ".rouge1," << *m.rouge1 << '\n';
    if (m.rougeL) os << "metrics," << kind << ".rougeL," << *m.rougeL << '\n';
  }
  for (const auto& [tag, f] : rb.tag_frequency) os << "tag_frequency," << tag << ',' << f << '\n';
  os << "chain_length,mean," << rb.chain_length.mean << '\n';
  os << "chain_length,median," << rb.chain_length.median << '\n';
  for (std::size_t i = 0; i < rb.chain_length.histogram.size(); ++i) {
    os << "chain_length,bin_" << i * rb.chain_length.bin_width << ',' << rb.chain_length.histogram[i] << '\n';
  }
  const auto& r = rb.mean_reward;
  os << "mean_reward,r_v," << r.r_v << "\nmean_reward,r_f," << r.r_f << "\nmean_reward,r_rep," << r.r_rep
     << "\nmean_reward,r_tag," << r.r_tag << "\nmean_reward,r_prmu," << r.r_prmu << "\nmean_reward,composite,"
     << r.composite << "\nmean_reward,foundation," << r.foundation << '\n';
  os << "tag_compliance,rate," << rb.tag_compliance << '\n';
  return os.str();
}

}  // namespace tagpr
