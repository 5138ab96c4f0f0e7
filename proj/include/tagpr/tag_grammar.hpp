#pragma once

// Tagged reasoning chains: flat `<name>body</name>` spans followed by an
// answer. Parsing is total; malformed markup is kept on the chain and
// reported by validate().

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tagpr {

/// Closed set of permitted tag names plus the minimum number of spans.
class TagRegistry {
 public:
  static constexpr int kDefaultMinTagCount = 3;

  TagRegistry() = default;
  explicit TagRegistry(std::vector<std::string> names, int min_tag_count = kDefaultMinTagCount)
      : names_(std::move(names)), min_tag_count_(min_tag_count) {
    if (min_tag_count_ < 1) throw std::invalid_argument("TagRegistry: min_tag_count must be >= 1");
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!is_valid_name(names_[i])) {
        throw std::invalid_argument("TagRegistry: invalid tag name '" + names_[i] + "'");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (names_[j] == names_[i]) {
          throw std::invalid_argument("TagRegistry: duplicate tag name '" + names_[i] + "'");
        }
      }
    }
  }

  /// The five core tags; the full primary set is configuration input.
  static TagRegistry defaults() {
    return TagRegistry({"analyze_input", "examine_examples", "identify_patterns",
                        "compare_entities", "make_decision"});
  }

  static bool is_valid_name(std::string_view name) {
    if (name.empty()) return false;
    for (char c : name) {
      if (!((c >= 'a' && c <= 'z') || c == '_')) return false;
    }
    return true;
  }

  [[nodiscard]] const std::vector<std::string>& names() const { return names_; }
  [[nodiscard]] int min_tag_count() const { return min_tag_count_; }
  [[nodiscard]] bool contains(std::string_view name) const {
    for (const auto& n : names_) {
      if (n == name) return true;
    }
    return false;
  }

  friend bool operator==(const TagRegistry&, const TagRegistry&) = default;

 private:
  std::vector<std::string> names_;
  int min_tag_count_ = kDefaultMinTagCount;
};

struct TagSpan {
  std::string name;
  std::size_t start = 0;  // offset of '<' of the open marker
  std::size_t end = 0;    // one past '>' of the close marker
  std::string body;
};

enum class ViolationKind { unclosed_tag, stray_close, unknown_tag, nested_tag, below_min_count, empty_body };

inline std::string_view to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::unclosed_tag: return "unclosed_tag";
    case ViolationKind::stray_close: return "stray_close";
    case ViolationKind::unknown_tag: return "unknown_tag";
    case ViolationKind::nested_tag: return "nested_tag";
    case ViolationKind::below_min_count: return "below_min_count";
    case ViolationKind::empty_body: return "empty_body";
  }
  return "unknown";
}

struct Violation {
  ViolationKind kind;
  std::string detail;
};

/// Markup problems found while parsing; only the structural kinds
/// (unclosed, stray, nested) appear here.
struct Malformation {
  ViolationKind kind;
  std::string name;
  std::size_t offset = 0;
};

struct TaggedChain {
  std::string raw;
  std::vector<TagSpan> spans;
  std::string answer;
  std::vector<Malformation> malformations;
  // Every tag name seen in a marker, including ones outside well-formed spans.
  std::vector<std::string> marker_names;

  /// Raw text split at span boundaries: inter-span text and whole spans in
  /// order. Concatenation reproduces `raw`.
  [[nodiscard]] std::vector<std::string_view> segments() const {
    std::vector<std::string_view> out;
    const std::string_view r = raw;
    std::size_t cursor = 0;
    for (const auto& s : spans) {
      if (s.start > cursor) out.push_back(r.substr(cursor, s.start - cursor));
      out.push_back(r.substr(s.start, s.end - s.start));
      cursor = s.end;
    }
    if (cursor < r.size()) out.push_back(r.substr(cursor));
    return out;
  }
};

struct ValidationReport {
  std::vector<Violation> violations;

  [[nodiscard]] bool ok() const { return violations.empty(); }
  [[nodiscard]] bool has(ViolationKind k) const {
    for (const auto& v : violations) {
      if (v.kind == k) return true;
    }
    return false;
  }
};

namespace detail {

struct Marker {
  std::string name;
  std::size_t start = 0;
  std::size_t end = 0;
  bool closing = false;
};

inline std::optional<Marker> marker_at(std::string_view s, std::size_t pos) {
  if (s[pos] != '<') return std::nullopt;
  std::size_t i = pos + 1;
  bool closing = false;
  if (i < s.size() && s[i] == '/') {
    closing = true;
    ++i;
  }
  const std::size_t name_begin = i;
  while (i < s.size() && ((s[i] >= 'a' && s[i] <= 'z') || s[i] == '_')) ++i;
  if (i == name_begin || i >= s.size() || s[i] != '>') return std::nullopt;
  return Marker{std::string(s.substr(name_begin, i - name_begin)), pos, i + 1, closing};
}

inline std::string trim(std::string_view s) {
  auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  std::size_t b = 0, e = s.size();
  while (b < e && ws(s[b])) ++b;
  while (e > b && ws(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

/// Total parser. Top-level `<name>...</name>` regions become spans; markers
/// opened inside an open span are recorded as nested and folded into the
/// outer body. The answer is the trimmed text after the last close marker.
inline TaggedChain parse_chain(std::string_view raw) {
  TaggedChain chain;
  chain.raw = std::string(raw);
  std::vector<detail::Marker> stack;
  std::size_t answer_from = 0;
  bool saw_close = false;

  std::size_t pos = 0;
  while (pos < raw.size()) {
    auto m = detail::marker_at(raw, pos);
    if (!m) {
      ++pos;
      continue;
    }
    pos = m->end;
    chain.marker_names.push_back(m->name);
    if (!m->closing) {
      if (!stack.empty()) {
        chain.malformations.push_back({ViolationKind::nested_tag, m->name, m->start});
      }
      stack.push_back(std::move(*m));
      continue;
    }
    saw_close = true;
    answer_from = m->end;
    std::size_t match = stack.size();
    for (std::size_t i = stack.size(); i-- > 0;) {
      if (stack[i].name == m->name) {
        match = i;
        break;
      }
    }
    if (match == stack.size()) {
      chain.malformations.push_back({ViolationKind::stray_close, m->name, m->start});
      continue;
    }
    for (std::size_t i = stack.size(); i-- > match + 1;) {
      chain.malformations.push_back({ViolationKind::unclosed_tag, stack[i].name, stack[i].start});
    }
    if (match == 0) {
      const auto& open = stack.front();
      chain.spans.push_back(TagSpan{open.name, open.start, m->end,
                                    std::string(raw.substr(open.end, m->start - open.end))});
    }
    stack.resize(match);
  }
  for (const auto& open : stack) {
    chain.malformations.push_back({ViolationKind::unclosed_tag, open.name, open.start});
  }
  chain.answer = detail::trim(saw_close ? raw.substr(answer_from) : raw);
  return chain;
}

/// Structural checks: markup well-formed, every tag registered, bodies
/// non-empty, and at least `min_tag_count` spans.
inline ValidationReport validate(const TaggedChain& chain, const TagRegistry& registry) {
  ValidationReport report;
  for (const auto& m : chain.malformations) {
    report.violations.push_back({m.kind, "<" + m.name + "> at offset " + std::to_string(m.offset)});
  }
  std::vector<std::string> unknown;
  for (const auto& name : chain.marker_names) {
    if (registry.contains(name)) continue;
    bool seen = false;
    for (const auto& u : unknown) seen = seen || u == name;
    if (!seen) {
      unknown.push_back(name);
      report.violations.push_back({ViolationKind::unknown_tag, name});
    }
  }
  for (const auto& s : chain.spans) {
    if (detail::trim(s.body).empty()) {
      report.violations.push_back({ViolationKind::empty_body, s.name + " at offset " + std::to_string(s.start)});
    }
  }
  const auto count = chain.spans.size();
  if (count < static_cast<std::size_t>(registry.min_tag_count())) {
    report.violations.push_back({ViolationKind::below_min_count,
                                 std::to_string(count) + " < " + std::to_string(registry.min_tag_count())});
  }
  return report;
}

/// Span-name frequencies normalized by the total span count.
inline std::map<std::string, double> tag_histogram(const std::vector<TaggedChain>& chains) {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& c : chains) {
    for (const auto& s : c.spans) {
      ++counts[s.name];
      ++total;
    }
  }
  std::map<std::string, double> out;
  for (const auto& [name, n] : counts) {
    out[name] = static_cast<double>(n) / static_cast<double>(total);
  }
  return out;
}

}  // namespace tagpr
