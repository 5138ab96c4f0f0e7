#pragma once

// Conversion between response text and symbol sequences. Markers are
// `<name>` / `</name>`; everything else is whitespace-separated words.

#include <string>
#include <string_view>
#include <vector>

namespace tagpr {

inline bool is_marker_symbol(std::string_view s) {
  return s.size() >= 3 && s.front() == '<' && s.back() == '>';
}

/// Words are separated by one space; markers attach without separators.
inline std::string render_symbols(const std::vector<std::string>& symbols) {
  std::string out;
  bool prev_word = false;
  for (const auto& s : symbols) {
    const bool word = !is_marker_symbol(s);
    if (word && prev_word) out.push_back(' ');
    out += s;
    prev_word = word;
  }
  return out;
}

inline std::vector<std::string> symbolize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '<') {
      const auto close = text.find('>', i);
      if (close != std::string_view::npos) {
        const auto inner = text.substr(i + 1, close - i - 1);
        const auto name = inner.starts_with('/') ? inner.substr(1) : inner;
        bool ok = !name.empty();
        for (char ch : name) ok = ok && ((ch >= 'a' && ch <= 'z') || ch == '_');
        if (ok) {
          flush();
          out.emplace_back(text.substr(i, close - i + 1));
          i = close + 1;
          continue;
        }
      }
    }
    if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
      flush();
    } else {
      word.push_back(c);
    }
    ++i;
  }
  flush();
  return out;
}

}  // namespace tagpr
