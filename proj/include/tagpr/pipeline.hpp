#pragma once

// Construction of the tagged reasoning-chain dataset:
//   generate -> accuracy filter -> judge filter -> exploratory tagging ->
//   tag clustering -> restricted tagging -> format filter -> JSONL.

#include <algorithm>
#include <array>
#include <numeric>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tagpr/clients.hpp"
#include "tagpr/kmeans.hpp"
#include "tagpr/reward.hpp"
#include "tagpr/synth_env.hpp"
#include "tagpr/tag_grammar.hpp"

namespace tagpr {

struct PipelineConfig {
  std::size_t instances_per_task = 1000;
  int rollouts_per_instance = 16;
  double rouge_threshold = 0.3;
  int judge_threshold = 15;  // kept iff composite > threshold
  std::size_t k_clusters = 9;
  int min_tag_count = TagRegistry::kDefaultMinTagCount;
  double temperature = 1.0;
  int parallelism = 4;
  std::size_t sample_report_size = 5;
  std::uint64_t seed = 17;
  RetryPolicy retry;

  void check() const {
    if (instances_per_task == 0 || rollouts_per_instance <= 0 || k_clusters == 0 || parallelism <= 0 ||
        min_tag_count < 1) {
      throw std::invalid_argument("PipelineConfig: counts must be positive");
    }
    if (!(rouge_threshold >= 0.0 && rouge_threshold <= 1.0)) {
      throw std::invalid_argument("PipelineConfig: rouge_threshold must lie in [0, 1]");
    }
  }
};

struct JudgeScore {
  int logical_consistency = 0;
  int factual_accuracy = 0;
  int completeness = 0;
  int conciseness = 0;

  [[nodiscard]] int composite() const {
    return logical_consistency + factual_accuracy + completeness + conciseness;
  }
};

/// Parses `{"logical_consistency": 0-5, ...}`; nullopt on anything else.
inline std::optional<JudgeScore> parse_judge_score(std::string_view text) {
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto field = [&](const char* name) -> std::optional<int> {
    auto it = j.find(name);
    if (it == j.end() || !it->is_number_integer()) return std::nullopt;
    const int v = it->get<int>();
    if (v < 0 || v > 5) return std::nullopt;
    return v;
  };
  const auto a = field("logical_consistency"), b = field("factual_accuracy"), c = field("completeness"),
             d = field("conciseness");
  if (!a || !b || !c || !d) return std::nullopt;
  return JudgeScore{*a, *b, *c, *d};
}

struct PipelineRecord {
  std::string task_id;
  TaskKind kind = TaskKind::classification;
  std::string user_id;
  std::string query;
  std::vector<ProfileEntry> profile;
  std::string gold;

  std::string candidate;
  std::vector<std::string> steps;
  std::string answer;

  bool accuracy_pass = false;
  bool judge_pass = false;
  bool format_pass = false;
  int judge_composite = -1;

  std::vector<std::string> step_free_tags;    // one normalized free-form tag per step
  std::vector<std::string> exploratory_tags;  // deduplicated, first-seen order
  std::vector<std::string> step_tags;         // registry tag per step, "" when dropped
  std::vector<std::string> final_tags;
  std::vector<std::string> flags;
  std::string chain;
};

struct PipelineStats {
  std::size_t instances = 0;
  std::size_t generated = 0;
  std::size_t accuracy_pass = 0;
  std::size_t judge_pass = 0;
  std::size_t tagged = 0;
  std::size_t format_pass = 0;
  std::size_t generation_client_failures = 0;
  std::size_t generation_contract_failures = 0;
  std::size_t judge_client_failures = 0;
  std::size_t judge_parse_failures = 0;
  std::size_t tagger_client_failures = 0;

  [[nodiscard]] std::size_t client_failures() const {
    return generation_client_failures + judge_client_failures + tagger_client_failures;
  }
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `parallelism` threads; results are
/// stored by index so the outcome does not depend on scheduling.
template <class R, class Fn>
std::vector<R> parallel_map(std::size_t n, int parallelism, Fn&& fn) {
  std::vector<R> out(n);
  const auto workers = static_cast<std::size_t>(std::max(1, parallelism));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) out[i] = fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline std::vector<std::string> split_lines(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto nl = s.find('\n', start);
    const auto line = trim(s.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start));
    if (!line.empty()) out.push_back(line);
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return out;
}

inline void log_event(const std::string& msg) { std::clog << "[pipeline] " << msg << '\n'; }

}  // namespace detail

/// Lowercase, whitespace and hyphen runs become '_', anything outside
/// [a-z_] is dropped.
inline std::string normalize_tag(std::string_view raw) {
  std::string out;
  bool pending_sep = false;
  for (char c : detail::trim(raw)) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c == ' ' || c == '\t' || c == '-' || c == '_') {
      pending_sep = !out.empty();
      continue;
    }
    if (c < 'a' || c > 'z') continue;
    if (pending_sep) out.push_back('_');
    pending_sep = false;
    out.push_back(c);
  }
  return out;
}

/// Prompt sent to the reasoning model for one instance.
inline std::string generation_prompt(const TaskInstance& t) {
  std::string p = "task_id: " + t.task_id + "\nkind: " + std::string(to_string(t.kind)) + "\nquery: " + t.query +
                  "\nprofile:\n";
  for (const auto& e : t.profile) p += "- " + e.entry.query + " -> " + e.entry.response + "\n";
  p += "Think step by step inside <think></think>, one step per line, then give the answer.";
  return p;
}

inline std::string judge_prompt(const PipelineRecord& r) {
  return "Rate the reasoning for logical_consistency, factual_accuracy, completeness and conciseness, each 0-5. "
         "Reply with a JSON object.\nquery: " +
         r.query + "\nreference: " + r.gold + "\ncandidate:\n" + r.candidate;
}

inline std::string explore_tag_prompt(const PipelineRecord& r) {
  std::string p = "MODE: explore\nGive one short free-form label per reasoning step as a JSON array.\n";
  for (const auto& s : r.steps) p += "STEP: " + s + "\n";
  return p;
}

inline std::string restricted_tag_prompt(const PipelineRecord& r, const TagRegistry& registry) {
  std::string p = "MODE: restrict\nALLOWED:";
  for (const auto& n : registry.names()) p += " " + n;
  p += "\nLabel each reasoning step with one allowed tag as a JSON array.\n";
  for (const auto& s : r.steps) p += "STEP: " + s + "\n";
  return p;
}

/// Candidates for every instance. Instances whose client keeps failing, or
/// that return the wrong number of texts, are skipped and counted.
inline std::vector<PipelineRecord> generate_candidates(const std::vector<TaskInstance>& instances,
                                                       GenerationClient& client, const PipelineConfig& cfg,
                                                       PipelineStats& stats, const FormatMarkers& markers = {}) {
  struct Outcome {
    std::vector<std::string> texts;
    int failure = 0;  // 1 client, 2 contract
  };
  const auto outcomes = detail::parallel_map<Outcome>(instances.size(), cfg.parallelism, [&](std::size_t i) {
    Outcome o;
    const CompletionRequest req{generation_prompt(instances[i]), cfg.rollouts_per_instance, cfg.temperature,
                                derive_seed(cfg.seed, 0x67656E, i)};
    try {
      o.texts = with_retry(cfg.retry, [&] { return client.complete(req); });
    } catch (const ClientError&) {
      o.failure = 1;
      return o;
    }
    if (o.texts.size() != static_cast<std::size_t>(cfg.rollouts_per_instance)) o.failure = 2;
    return o;
  });
  std::vector<PipelineRecord> out;
  stats.instances += instances.size();
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& t = instances[i];
    if (outcomes[i].failure == 1) {
      ++stats.generation_client_failures;
      detail::log_event("generation failed for " + t.task_id + "; instance skipped");
      continue;
    }
    if (outcomes[i].failure == 2) {
      ++stats.generation_contract_failures;
      detail::log_event("client returned " + std::to_string(outcomes[i].texts.size()) + " texts for " + t.task_id +
                        ", expected " + std::to_string(cfg.rollouts_per_instance) + "; instance skipped");
      continue;
    }
    for (const auto& text : outcomes[i].texts) {
      PipelineRecord r;
      r.task_id = t.task_id;
      r.kind = t.kind;
      r.user_id = t.user_id;
      r.query = t.query;
      r.profile = t.profile_entries();
      r.gold = t.gold;
      r.candidate = text;
      const auto parts = split_response(text, markers);
      r.steps = detail::split_lines(parts.reasoning);
      r.answer = parts.answer;
      out.push_back(std::move(r));
    }
  }
  stats.generated += out.size();
  return out;
}

inline std::vector<PipelineRecord> accuracy_filter(std::vector<PipelineRecord> records, const PipelineConfig& cfg) {
  std::vector<PipelineRecord> out;
  for (auto& r : records) {
    r.accuracy_pass = r.kind == TaskKind::classification ? normalize_label(r.answer) == normalize_label(r.gold)
                                                         : rouge1(r.answer, r.gold) >= cfg.rouge_threshold;
    if (r.accuracy_pass) out.push_back(std::move(r));
  }
  return out;
}

/// Keeps records whose four-metric composite is strictly above the threshold.
inline std::vector<PipelineRecord> judge_filter(std::vector<PipelineRecord> records, GenerationClient& judge,
                                                const PipelineConfig& cfg, PipelineStats& stats) {
  struct Outcome {
    std::optional<std::string> text;
  };
  const auto outcomes = detail::parallel_map<Outcome>(records.size(), cfg.parallelism, [&](std::size_t i) {
    const CompletionRequest req{judge_prompt(records[i]), 1, 0.0, derive_seed(cfg.seed, 0x6A756467, i)};
    try {
      auto texts = with_retry(cfg.retry, [&] { return judge.complete(req); });
      if (texts.empty()) return Outcome{std::string()};
      return Outcome{std::move(texts.front())};
    } catch (const ClientError&) {
      return Outcome{};
    }
  });
  std::vector<PipelineRecord> out;
  std::size_t parse_failures = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    if (!outcomes[i].text) {
      ++stats.judge_client_failures;
      detail::log_event("judge unavailable for a record of " + r.task_id + "; dropped");
      continue;
    }
    const auto score = parse_judge_score(*outcomes[i].text);
    if (!score) {
      ++parse_failures;
      continue;
    }
    r.judge_composite = score->composite();
    r.judge_pass = r.judge_composite > cfg.judge_threshold;
    if (r.judge_pass) out.push_back(std::move(r));
  }
  if (parse_failures > 0) {
    detail::log_event(std::to_string(parse_failures) + " judge replies were not valid score JSON; records dropped");
  }
  stats.judge_parse_failures += parse_failures;
  return out;
}

namespace detail {

inline std::optional<std::vector<std::string>> request_tags(GenerationClient& tagger, const std::string& prompt,
                                                            const PipelineConfig& cfg, std::uint64_t salt) {
  const CompletionRequest req{prompt, 1, 0.0, derive_seed(cfg.seed, salt)};
  std::vector<std::string> texts;
  try {
    texts = with_retry(cfg.retry, [&] { return tagger.complete(req); });
  } catch (const ClientError&) {
    return std::nullopt;
  }
  std::vector<std::string> tags;
  if (texts.empty()) return tags;
  const auto j = nlohmann::json::parse(texts.front(), nullptr, false);
  if (!j.is_array()) return tags;
  for (const auto& e : j) {
    if (e.is_string()) tags.push_back(e.get<std::string>());
  }
  return tags;
}

}  // namespace detail

/// Free-form per-step labels, normalized and deduplicated per record.
inline std::vector<PipelineRecord> exploratory_tagging(std::vector<PipelineRecord> records, GenerationClient& tagger,
                                                       const PipelineConfig& cfg, PipelineStats& stats) {
  const auto outcomes = detail::parallel_map<std::optional<std::vector<std::string>>>(
      records.size(), cfg.parallelism, [&](std::size_t i) {
        return detail::request_tags(tagger, explore_tag_prompt(records[i]), cfg, 0x6578706C00000000ULL + i);
      });
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    if (!outcomes[i]) {
      ++stats.tagger_client_failures;
      r.flags.emplace_back("exploratory_tagger_failed");
      continue;
    }
    r.step_free_tags.clear();
    r.exploratory_tags.clear();
    for (const auto& raw : *outcomes[i]) {
      auto t = normalize_tag(raw);
      r.step_free_tags.push_back(t);
      if (!t.empty() && std::find(r.exploratory_tags.begin(), r.exploratory_tags.end(), t) == r.exploratory_tags.end()) {
        r.exploratory_tags.push_back(std::move(t));
      }
    }
    if (r.exploratory_tags.empty()) r.flags.emplace_back("empty_exploratory_tags");
    if (r.step_free_tags.size() != r.steps.size()) r.flags.emplace_back("exploratory_step_count_mismatch");
  }
  return records;
}

/// Hashed character-trigram embedding of `#tag#`, L2-normalized.
inline std::vector<double> embed_tag(std::string_view tag, std::size_t dim = 256) {
  std::vector<double> v(dim, 0.0);
  if (tag.empty()) return v;
  const std::string padded = "#" + std::string(tag) + "#";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) v[fnv1a(std::string_view(padded).substr(i, 3)) % dim] += 1.0;
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

inline std::vector<std::vector<double>> embed_tags(const std::vector<std::string>& tags, std::size_t dim = 256) {
  std::vector<std::vector<double>> out;
  out.reserve(tags.size());
  for (const auto& t : tags) out.push_back(embed_tag(t, dim));
  return out;
}

/// Per cluster, the most frequent member string (ties: lexicographically
/// smallest) becomes a primary tag. Empty clusters contribute nothing.
inline TagRegistry derive_primary_tags(const std::vector<std::string>& tags, const std::vector<std::size_t>& counts,
                                       const std::vector<std::size_t>& assignments, std::size_t k,
                                       int min_tag_count = TagRegistry::kDefaultMinTagCount) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < k; ++c) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < tags.size(); ++i) {
      if (assignments[i] != c) continue;
      if (!best || counts[i] > counts[*best] || (counts[i] == counts[*best] && tags[i] < tags[*best])) best = i;
    }
    if (best) names.push_back(tags[*best]);
  }
  return TagRegistry(std::move(names), min_tag_count);
}

struct TagClustering {
  std::vector<std::string> tags;  // distinct, sorted
  std::vector<std::size_t> counts;
  KMeansResult<double> kmeans;
  TagRegistry registry;
};

inline TagClustering cluster_exploratory_tags(const std::vector<PipelineRecord>& records, const PipelineConfig& cfg) {
  std::map<std::string, std::size_t> freq;
  for (const auto& r : records) {
    for (const auto& t : r.step_free_tags) {
      if (!t.empty()) ++freq[t];
    }
  }
  TagClustering out;
  for (const auto& [t, n] : freq) {
    out.tags.push_back(t);
    out.counts.push_back(n);
  }
  if (out.tags.empty()) throw std::runtime_error("no exploratory tags to cluster");
  out.kmeans = kmeans(embed_tags(out.tags), cfg.k_clusters, derive_seed(cfg.seed, 0x6B6D), 200);
  out.registry = derive_primary_tags(out.tags, out.counts, out.kmeans.assignments, cfg.k_clusters, cfg.min_tag_count);
  return out;
}

/// Tags every step with a registry tag; anything else is dropped and flagged.
inline std::vector<PipelineRecord> restricted_tagging(std::vector<PipelineRecord> records, const TagRegistry& registry,
                                                      GenerationClient& tagger, const PipelineConfig& cfg,
                                                      PipelineStats& stats) {
  const auto outcomes = detail::parallel_map<std::optional<std::vector<std::string>>>(
      records.size(), cfg.parallelism, [&](std::size_t i) {
        return detail::request_tags(tagger, restricted_tag_prompt(records[i], registry), cfg, 0x72737472ULL << 32 | i);
      });
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    r.step_tags.assign(r.steps.size(), "");
    r.final_tags.clear();
    if (!outcomes[i]) {
      ++stats.tagger_client_failures;
      r.flags.emplace_back("restricted_tagger_failed");
      continue;
    }
    const auto& tags = *outcomes[i];
    if (tags.size() != r.steps.size()) r.flags.emplace_back("restricted_step_count_mismatch");
    bool dropped = false;
    for (std::size_t s = 0; s < std::min(tags.size(), r.steps.size()); ++s) {
      const auto t = normalize_tag(tags[s]);
      if (registry.contains(t)) {
        r.step_tags[s] = t;
        r.final_tags.push_back(t);
      } else {
        dropped = true;
      }
    }
    if (dropped) r.flags.emplace_back("off_registry_tag_dropped");
  }
  stats.tagged += records.size();
  return records;
}

/// Tagged steps as `<tag>step</tag>`, untagged steps as plain text, one per line.
inline std::string render_tagged_chain(const PipelineRecord& r) {
  std::string out;
  for (std::size_t s = 0; s < r.steps.size(); ++s) {
    if (s > 0) out.push_back('\n');
    const auto& tag = s < r.step_tags.size() ? r.step_tags[s] : std::string();
    out += tag.empty() ? r.steps[s] : "<" + tag + ">" + r.steps[s] + "</" + tag + ">";
  }
  return out;
}

inline nlohmann::json record_to_json(const PipelineRecord& r) {
  nlohmann::json profile = nlohmann::json::array();
  for (const auto& e : r.profile) profile.push_back({{"query", e.query}, {"response", e.response}});
  return {{"task_id", r.task_id},
          {"task_kind", to_string(r.kind)},
          {"user_id", r.user_id},
          {"query", r.query},
          {"profile", profile},
          {"chain", r.chain},
          {"answer", r.answer},
          {"gold", r.gold},
          {"final_tags", r.final_tags},
          {"provenance",
           {{"stage_flags",
             {{"accuracy_pass", r.accuracy_pass}, {"judge_pass", r.judge_pass}, {"format_pass", r.format_pass}}},
            {"judge_composite", r.judge_composite},
            {"flags", r.flags}}}};
}

/// Keeps records whose rendered chain validates, writes them as JSONL via a
/// temporary file (removed on failure) and returns the survivors.
inline std::vector<PipelineRecord> format_filter_and_serialize(std::vector<PipelineRecord> records,
                                                               const TagRegistry& registry,
                                                               const std::filesystem::path& path, PipelineStats& stats) {
  std::vector<PipelineRecord> kept;
  for (auto& r : records) {
    r.chain = render_tagged_chain(r);
    r.format_pass = validate(parse_chain(r.chain), registry).ok();
    if (r.format_pass) kept.push_back(std::move(r));
  }
  stats.format_pass += kept.size();

  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    for (const auto& r : kept) out << record_to_json(r).dump() << '\n';
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("failed to write dataset " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("failed to move dataset into place at " + path.string());
  }
  return kept;
}

struct PipelineClients {
  GenerationClient* generator = nullptr;
  GenerationClient* judge = nullptr;
  GenerationClient* tagger = nullptr;
};

struct PipelineResult {
  std::vector<PipelineRecord> records;
  TagRegistry registry;
  PipelineStats stats;
  TagClustering clustering;
};

inline nlohmann::json stats_to_json(const PipelineStats& s) {
  return {{"instances", s.instances},
          {"generated", s.generated},
          {"accuracy_pass", s.accuracy_pass},
          {"judge_pass", s.judge_pass},
          {"tagged", s.tagged},
          {"format_pass", s.format_pass},
          {"failures",
           {{"generation_client", s.generation_client_failures},
            {"generation_contract", s.generation_contract_failures},
            {"judge_client", s.judge_client_failures},
            {"judge_parse", s.judge_parse_failures},
            {"tagger_client", s.tagger_client_failures}}}};
}

inline PipelineResult run_pipeline(const std::vector<TaskInstance>& instances, const PipelineClients& clients,
                                   const PipelineConfig& cfg, const std::filesystem::path& dataset_path) {
  cfg.check();
  PipelineResult res;
  auto records = generate_candidates(instances, *clients.generator, cfg, res.stats);
  records = accuracy_filter(std::move(records), cfg);
  res.stats.accuracy_pass = records.size();
  records = judge_filter(std::move(records), *clients.judge, cfg, res.stats);
  res.stats.judge_pass = records.size();
  records = exploratory_tagging(std::move(records), *clients.tagger, cfg, res.stats);
  const bool any_tags = std::any_of(records.begin(), records.end(), [](const PipelineRecord& r) {
    return std::any_of(r.step_free_tags.begin(), r.step_free_tags.end(), [](const std::string& t) { return !t.empty(); });
  });
  if (!any_tags) {
    // Nothing to consolidate (typically every client call failed): write an
    // empty dataset so the manifest still reports the stage counts.
    detail::log_event("no exploratory tags survived; registry not derived, dataset is empty");
    res.records = format_filter_and_serialize({}, res.registry, dataset_path, res.stats);
    return res;
  }
  res.clustering = cluster_exploratory_tags(records, cfg);
  res.registry = res.clustering.registry;
  records = restricted_tagging(std::move(records), res.registry, *clients.tagger, cfg, res.stats);
  res.records = format_filter_and_serialize(std::move(records), res.registry, dataset_path, res.stats);
  return res;
}

/// `n` seeded random final records, pretty-printed for manual review.
inline std::string sample_report(const std::vector<PipelineRecord>& records, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x73616D70));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::ostringstream os;
  for (auto i : idx) {
    const auto& r = records[i];
    os << "=== " << r.task_id << " (" << to_string(r.kind) << ", user " << r.user_id << ", judge " << r.judge_composite
       << ")\nquery: " << r.query << "\n" << r.chain << "\nanswer: " << r.answer << "\ngold: " << r.gold << "\n\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic mock clients for offline runs

namespace mock {

struct TagFamily {
  std::string_view canonical;
  std::array<std::string_view, 3> labels;  // first is the most common surface form
  std::string_view phrase;
};

inline const std::array<TagFamily, 9>& tag_families() {
  static const std::array<TagFamily, 9> families{{
      {"analyze_input", {"Analyze Input", "analyse input", "analyzing the input"}, "Read the query"},
      {"examine_examples", {"Examine Examples", "examine the examples", "examining examples"}, "Look at the profile examples"},
      {"identify_patterns", {"Identify Patterns", "identify pattern", "identifying patterns"}, "Spot the recurring pattern"},
      {"compare_entities", {"Compare Entities", "compare entity", "comparing entities"}, "Compare the item with past items"},
      {"make_decision", {"Make Decision", "make a decision", "making decision"}, "Decide on the answer"},
      {"infer_preference", {"Infer Preference", "infer preferences", "inferring preference"}, "Infer what the user prefers"},
      {"summarize_history", {"Summarize History", "summarise history", "summarizing the history"}, "Summarize the user history"},
      {"verify_answer", {"Verify Answer", "verify the answer", "verifying answer"}, "Double-check the answer"},
      {"consider_context", {"Consider Context", "consider the context", "considering context"}, "Consider the wider context"},
  }};
  return families;
}

inline std::optional<std::size_t> family_of_step(std::string_view step) {
  const auto& fams = tag_families();
  for (std::size_t f = 0; f < fams.size(); ++f) {
    if (step.starts_with(fams[f].phrase)) return f;
  }
  return std::nullopt;
}

inline std::string field(std::string_view prompt, std::string_view key) {
  const auto pos = prompt.find(key);
  if (pos == std::string_view::npos) return {};
  const auto start = pos + key.size();
  const auto end = prompt.find('\n', start);
  return std::string(prompt.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
}

/// Reasoner: 3-6 steps drawn from the families (analyze first, decide
/// last), answer correct with probability `p_correct`. Roughly 1 in 25
/// candidates embeds a stray tag marker in a step.
inline MockClient::Writer reasoner(const SynthEnv& env, const std::map<std::string, TaskInstance>& by_id,
                                   double p_correct = 0.75) {
  return [&env, &by_id, p_correct](std::string_view prompt, Rng& rng) -> std::string {
    const auto it = by_id.find(field(prompt, "task_id: "));
    if (it == by_id.end()) return "<think>Read the query.</think> unknown";
    const auto& t = it->second;
    const auto& fams = tag_families();
    std::vector<std::size_t> middle{1, 2, 3, 5, 6, 7, 8};
    std::shuffle(middle.begin(), middle.end(), rng);
    middle.resize(1 + rng() % 4);
    std::vector<std::size_t> steps{0};
    steps.insert(steps.end(), middle.begin(), middle.end());
    steps.push_back(4);
    std::string answer = t.gold;
    if (uniform01(rng) >= p_correct) {
      if (t.kind == TaskKind::classification) {
        answer = class_symbol((t.gold_label + 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(env.config().num_classes - 1))) %
                              env.config().num_classes);
      } else {
        auto toks = symbolize(t.gold);
        for (std::size_t i = 0; i < toks.size(); ++i) {
          if (uniform01(rng) < 0.8) toks[i] = content_symbol(static_cast<int>(rng() % static_cast<std::uint64_t>(env.config().content_vocab)));
        }
        answer = render_symbols(toks);
      }
    }
    const bool inject = uniform01(rng) < 0.04;
    std::string text = "<think>";
    for (std::size_t s = 0; s < steps.size(); ++s) {
      if (s > 0) text += "\n";
      text += std::string(fams[steps[s]].phrase);
      if (steps[s] == 0) text += ": " + t.query + ".";
      else if (steps[s] == 4) text += ": " + answer + ".";
      else if (steps[s] == 1 && !t.profile.empty()) text += ", e.g. " + t.profile.back().entry.response + ".";
      else text += ".";
      if (inject && s == 1) text += " <identify_patterns>";
    }
    text += "</think>\n" + answer;
    return text;
  };
}

/// Judge: higher scores when the candidate's answer matches the reference;
/// about 3% of replies are not JSON.
inline MockClient::Writer judge() {
  return [](std::string_view prompt, Rng& rng) -> std::string {
    if (uniform01(rng) < 0.03) return "I would rate this response quite highly.";
    const auto reference = field(prompt, "reference: ");
    const auto cand_pos = prompt.find("candidate:\n");
    const auto candidate = cand_pos == std::string_view::npos ? std::string_view{} : prompt.substr(cand_pos + 11);
    const auto answer = split_response(candidate).answer;
    const int base = normalize_label(answer) == normalize_label(reference) ? 4 : 2;
    auto draw = [&] { return std::clamp(base + static_cast<int>(rng() % 3) - (rng() % 4 == 0 ? 1 : 0), 0, 5); };
    return nlohmann::json{{"logical_consistency", draw()},
                          {"factual_accuracy", draw()},
                          {"completeness", draw()},
                          {"conciseness", draw()}}
        .dump();
  };
}

/// Tagger for both modes. Explore: a surface form of the step's family
/// (60/25/15). Restrict: the allowed tag closest to the family's canonical
/// name, or an off-registry tag about 4% of the time.
inline MockClient::Writer tagger() {
  return [](std::string_view prompt, Rng& rng) -> std::string {
    const bool restrict_mode = prompt.starts_with("MODE: restrict");
    std::vector<std::string> allowed;
    if (restrict_mode) {
      std::istringstream is(field(prompt, "ALLOWED:"));
      for (std::string s; is >> s;) allowed.push_back(s);
    }
    nlohmann::json out = nlohmann::json::array();
    std::size_t pos = 0;
    while ((pos = prompt.find("STEP: ", pos)) != std::string_view::npos) {
      pos += 6;
      const auto end = prompt.find('\n', pos);
      const auto step = prompt.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
      const auto fam = family_of_step(step);
      const auto& fams = tag_families();
      if (!restrict_mode) {
        if (!fam) {
          out.push_back("other");
          continue;
        }
        const double u = uniform01(rng);
        out.push_back(std::string(fams[*fam].labels[u < 0.6 ? 0 : (u < 0.85 ? 1 : 2)]));
        continue;
      }
      if (uniform01(rng) < 0.04 || allowed.empty() || !fam) {
        out.push_back("misc_note");
        continue;
      }
      const auto target = embed_tag(fams[*fam].canonical);
      std::string best = allowed.front();
      double best_sim = -1.0;
      for (const auto& a : allowed) {
        const auto v = embed_tag(a);
        double sim = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) sim += v[i] * target[i];
        if (sim > best_sim) {
          best_sim = sim;
          best = a;
        }
      }
      out.push_back(best);
    }
    return out.dump();
  };
}

}  // namespace mock

}  // namespace tagpr
