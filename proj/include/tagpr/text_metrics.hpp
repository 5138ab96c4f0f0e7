#pragma once

// Tokenization, n-gram statistics, ROUGE-1 / ROUGE-L and label metrics.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tagpr {

using TokenSeq = std::vector<std::string>;

namespace utf8 {

/// Decodes one code point starting at `pos`, advancing `pos`. Invalid bytes
/// decode as U+FFFD and consume a single byte.
inline char32_t next(std::string_view s, std::size_t& pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  auto cont = [&](std::size_t i) -> int {
    if (pos + i >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[pos + i]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    ++pos;
    return b0;
  }
  int len = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    ++pos;
    return 0xFFFD;
  }
  for (int i = 1; i < len; ++i) {
    const int c = cont(i);
    if (c < 0) {
      ++pos;
      return 0xFFFD;
    }
    cp = (cp << 6) | static_cast<char32_t>(c);
  }
  pos += static_cast<std::size_t>(len);
  return cp;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

}  // namespace utf8

namespace detail {

inline bool is_space(char32_t c) {
  switch (c) {
    case U' ': case U'\t': case U'\n': case U'\r': case U'\v': case U'\f':
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000: case 0xFEFF:
      return true;
    default:
      return c >= 0x2000 && c <= 0x200B;
  }
}

inline bool is_punct(char32_t c) {
  if (c < 0x80) {
    return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) ||
           (c >= 0x5B && c <= 0x60) || (c >= 0x7B && c <= 0x7E);
  }
  return (c >= 0xA1 && c <= 0xBF && c != 0xAA && c != 0xB5 && c != 0xBA) ||
         c == 0xD7 || c == 0xF7 || (c >= 0x2010 && c <= 0x205E) ||
         (c >= 0x3001 && c <= 0x303F) || (c >= 0xFF01 && c <= 0xFF0F) ||
         (c >= 0xFF1A && c <= 0xFF20) || (c >= 0xFF3B && c <= 0xFF40) ||
         (c >= 0xFF5B && c <= 0xFF65) || c == 0xFFFD;
}

// Ideographs, kana and hangul syllables each form a token of their own.
inline bool is_cjk(char32_t c) {
  return (c >= 0x3040 && c <= 0x30FF) || (c >= 0x3400 && c <= 0x4DBF) ||
         (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0xAC00 && c <= 0xD7AF) ||
         (c >= 0xF900 && c <= 0xFAFF) || (c >= 0x20000 && c <= 0x2FA1F);
}

inline char32_t to_lower(char32_t c) {
  if (c >= U'A' && c <= U'Z') return c + 32;
  // Latin-1 supplement, Greek and Cyrillic capitals with a fixed offset.
  if ((c >= 0xC0 && c <= 0xDE && c != 0xD7)) return c + 32;
  if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return c + 32;
  if (c >= 0x410 && c <= 0x42F) return c + 32;
  if (c >= 0x400 && c <= 0x40F) return c + 80;
  return c;
}

}  // namespace detail

/// Lowercases, splits on whitespace and punctuation (dropping both) and
/// splits CJK runs into single characters.
inline TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  std::size_t pos = 0;
  while (pos < text.size()) {
    const char32_t c = utf8::next(text, pos);
    if (detail::is_space(c) || detail::is_punct(c)) {
      flush();
    } else if (detail::is_cjk(c)) {
      flush();
      utf8::append(cur, c);
      flush();
    } else {
      utf8::append(cur, detail::to_lower(c));
    }
  }
  flush();
  return out;
}

/// Lowercase + trim; the normalization used for exact-match comparisons.
inline std::string normalize_label(std::string_view s) {
  std::size_t b = 0, e = s.size();
  auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  while (b < e && ws(s[b])) ++b;
  while (e > b && ws(s[e - 1])) --e;
  std::string out;
  std::size_t pos = b;
  const auto view = s.substr(0, e);
  while (pos < e) utf8::append(out, detail::to_lower(utf8::next(view, pos)));
  return out;
}

struct NGramStats {
  int n = 0;
  std::size_t total = 0;   // multiset size
  std::size_t unique = 0;  // set size
};

inline NGramStats ngram_stats(const TokenSeq& seq, int n) {
  if (n <= 0) throw std::invalid_argument("ngram_stats: n must be >= 1");
  NGramStats st;
  st.n = n;
  const auto un = static_cast<std::size_t>(n);
  if (seq.size() < un) return st;
  st.total = seq.size() - un + 1;
  std::set<std::vector<std::string_view>> seen;
  for (std::size_t i = 0; i + un <= seq.size(); ++i) {
    seen.emplace(seq.begin() + static_cast<std::ptrdiff_t>(i),
                 seq.begin() + static_cast<std::ptrdiff_t>(i + un));
  }
  st.unique = seen.size();
  return st;
}

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

inline PrfScore prf(std::size_t hits, std::size_t cand_len, std::size_t ref_len) {
  PrfScore s;
  if (hits == 0 || cand_len == 0 || ref_len == 0) return s;
  s.precision = static_cast<double>(hits) / static_cast<double>(cand_len);
  s.recall = static_cast<double>(hits) / static_cast<double>(ref_len);
  s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Clipped unigram overlap precision/recall/F1.
inline PrfScore rouge1_prf(std::string_view candidate, std::string_view reference) {
  const auto cand = tokenize(candidate);
  const auto ref = tokenize(reference);
  std::unordered_map<std::string, std::size_t> ref_counts;
  for (const auto& t : ref) ++ref_counts[t];
  std::size_t hits = 0;
  for (const auto& t : cand) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++hits;
    }
  }
  return detail::prf(hits, cand.size(), ref.size());
}

inline double rouge1(std::string_view candidate, std::string_view reference) {
  return rouge1_prf(candidate, reference).f1;
}

inline PrfScore rougeL_prf(std::string_view candidate, std::string_view reference) {
  const auto cand = tokenize(candidate);
  const auto ref = tokenize(reference);
  return detail::prf(detail::lcs_length(cand, ref), cand.size(), ref.size());
}

inline double rougeL(std::string_view candidate, std::string_view reference) {
  return rougeL_prf(candidate, reference).f1;
}

struct LabelMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> mae;   // only when every label parses as a number
  std::optional<double> rmse;
};

namespace detail {

inline std::optional<double> parse_number(std::string_view s) {
  const std::string t = normalize_label(s);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  const auto* first = t.data();
  const auto* last = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Accuracy and macro-F1 over normalized labels; MAE/RMSE when numeric.
/// Macro-F1 averages over every class seen in golds or preds.
inline LabelMetrics classification_metrics(const std::vector<std::string>& preds,
                                           const std::vector<std::string>& golds) {
  if (preds.size() != golds.size()) {
    throw std::invalid_argument("classification_metrics: length mismatch");
  }
  if (preds.empty()) throw std::invalid_argument("classification_metrics: empty input");
  LabelMetrics m;
  const std::size_t n = preds.size();
  std::map<std::string, std::size_t> tp, fp, fn;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = normalize_label(preds[i]);
    const auto g = normalize_label(golds[i]);
    tp.try_emplace(p, 0);
    tp.try_emplace(g, 0);
    if (p == g) {
      ++correct;
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  double f1_sum = 0.0;
  for (const auto& [label, t] : tp) {
    const double denom = 2.0 * static_cast<double>(t) + static_cast<double>(fp[label]) +
                         static_cast<double>(fn[label]);
    f1_sum += denom > 0.0 ? 2.0 * static_cast<double>(t) / denom : 0.0;
  }
  m.macro_f1 = f1_sum / static_cast<double>(tp.size());

  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = detail::parse_number(preds[i]);
    const auto g = detail::parse_number(golds[i]);
    if (!p || !g) return m;
    abs_sum += std::abs(*p - *g);
    sq_sum += (*p - *g) * (*p - *g);
  }
  m.mae = abs_sum / static_cast<double>(n);
  m.rmse = std::sqrt(sq_sum / static_cast<double>(n));
  return m;
}

}  // namespace tagpr
