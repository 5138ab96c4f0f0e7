#pragma once

// Reward signals for tagged responses and their guided (composite) and
// exploratory (foundation) combinations.

#include <functional>
#include <string>
#include <string_view>

#include "tagpr/tag_grammar.hpp"
#include "tagpr/text_metrics.hpp"

namespace tagpr {

enum class TaskKind { classification, generation };

inline std::string_view to_string(TaskKind k) {
  return k == TaskKind::classification ? "classification" : "generation";
}

inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "generation") return TaskKind::generation;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

struct RewardWeights {
  double alpha = 0.8;
  double beta = 0.8;
  double gamma = 0.2;
};

struct RepetitionConfig {
  int n = 4;
  double delta = 1e-6;
};

struct FormatMarkers {
  std::string open = "<think>";
  std::string close = "</think>";
};

struct RewardBreakdown {
  double r_v = 0.0;
  double r_f = 0.0;
  double r_rep = 0.0;
  double r_tag = 0.0;
  double r_prmu = 0.5;
  double composite = 0.0;
  double foundation = 0.0;
};

/// Reasoning body and answer split of a raw response.
struct ResponseParts {
  std::string reasoning;
  std::string answer;
  bool has_block = false;
};

namespace detail {

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  if (needle.empty()) return 0;
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
  return n;
}

}  // namespace detail

/// Splits at the first open marker and the last close marker. Without a
/// complete block the whole text is treated as the reasoning chain.
inline ResponseParts split_response(std::string_view raw, const FormatMarkers& markers = {}) {
  ResponseParts parts;
  const auto open = raw.find(markers.open);
  const auto close = raw.rfind(markers.close);
  if (open == std::string_view::npos || close == std::string_view::npos || close < open + markers.open.size()) {
    parts.reasoning = std::string(raw);
    parts.answer = parse_chain(raw).answer;
    return parts;
  }
  parts.has_block = true;
  const auto body_begin = open + markers.open.size();
  parts.reasoning = std::string(raw.substr(body_begin, close - body_begin));
  parts.answer = detail::trim(raw.substr(close + markers.close.size()));
  return parts;
}

inline double verifiable_reward(TaskKind kind, std::string_view y, std::string_view y_star) {
  if (kind == TaskKind::classification) return normalize_label(y) == normalize_label(y_star) ? 1.0 : 0.0;
  return rouge1(y, y_star);
}

/// 1 iff the text is exactly one think block (only whitespace before it)
/// followed by a non-empty answer.
inline double format_reward(std::string_view raw, const FormatMarkers& markers = {}) {
  if (detail::count_occurrences(raw, markers.open) != 1 || detail::count_occurrences(raw, markers.close) != 1) {
    return 0.0;
  }
  const auto open = raw.find(markers.open);
  const auto close = raw.find(markers.close);
  if (close < open + markers.open.size()) return 0.0;
  if (!detail::trim(raw.substr(0, open)).empty()) return 0.0;
  return detail::trim(raw.substr(close + markers.close.size())).empty() ? 0.0 : 1.0;
}

inline double repetition_reward(std::string_view raw, const RepetitionConfig& cfg = {}) {
  const auto st = ngram_stats(tokenize(raw), cfg.n);
  if (st.total == 0) return 0.0;
  return (static_cast<double>(st.unique) - static_cast<double>(st.total)) /
         (static_cast<double>(st.total) + cfg.delta);
}

inline double tag_reward(std::string_view raw, const TagRegistry& registry, const FormatMarkers& markers = {}) {
  const auto parts = split_response(raw, markers);
  return validate(parse_chain(parts.reasoning), registry).ok() ? 0.0 : -1.0;
}

inline double composite_reward(const RewardBreakdown& b, const RewardWeights& w = {}) {
  return w.alpha * (b.r_v + b.r_rep) * b.r_f + w.beta * b.r_tag + w.gamma * b.r_prmu;
}

inline double foundation_reward(const RewardBreakdown& b) { return (b.r_v + b.r_rep) * b.r_f; }

/// Everything needed to score a response against its reference.
struct RewardContext {
  TagRegistry registry = TagRegistry::defaults();
  RewardWeights weights;
  RepetitionConfig repetition;
  FormatMarkers markers;
  // Personalization scorer hook, returns a value in (0,1). Must be safe for
  // concurrent read-only calls. When empty the PRMU term is 0.5.
  std::function<double(std::string_view chain, std::string_view answer)> prmu;
};

inline RewardBreakdown score_response(std::string_view raw, TaskKind kind, std::string_view gold,
                                      const RewardContext& ctx) {
  RewardBreakdown b;
  const auto parts = split_response(raw, ctx.markers);
  b.r_v = verifiable_reward(kind, parts.answer, gold);
  b.r_f = format_reward(raw, ctx.markers);
  b.r_rep = repetition_reward(raw, ctx.repetition);
  b.r_tag = validate(parse_chain(parts.reasoning), ctx.registry).ok() ? 0.0 : -1.0;
  b.r_prmu = ctx.prmu ? ctx.prmu(parts.reasoning, parts.answer) : 0.5;
  b.composite = composite_reward(b, ctx.weights);
  b.foundation = foundation_reward(b);
  return b;
}

}  // namespace tagpr
