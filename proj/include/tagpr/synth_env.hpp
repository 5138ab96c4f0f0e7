#pragma once

// Synthetic personalization world. Every user labels items with
// argmax_c (W_c + U_c) . x, where W is shared and U is the user's offset, and
// writes generation targets in a personal four-token style. Profiles are
// drawn from the user's own history, so the gold answer is recoverable only
// by reading the profile.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tagpr/random.hpp"
#include "tagpr/reward.hpp"
#include "tagpr/symbols.hpp"

namespace tagpr {

enum class Retrieval { recency, random };

inline std::string_view to_string(Retrieval r) { return r == Retrieval::recency ? "recency" : "random"; }

inline Retrieval retrieval_from_string(std::string_view s) {
  if (s == "recency") return Retrieval::recency;
  if (s == "random") return Retrieval::random;
  throw std::invalid_argument("unknown retrieval '" + std::string(s) + "'");
}

struct EnvConfig {
  int num_classes = 4;
  int item_dim = 3;
  int content_vocab = 12;  // w0 .. w{n-1}; w0 means "no profile evidence"
  double prototype_scale = 1.0;
  double user_offset_scale = 1.0;
  int num_users = 20;
  int history_len = 32;
  int profile_k = 8;
  Retrieval retrieval = Retrieval::recency;
  double generation_fraction = 0.0;  // share of sampled tasks that are generation tasks
  std::uint64_t seed = 7;
};

struct ProfileEntry {
  std::string query;
  std::string response;
};

struct SynthUser {
  std::string user_id;
  std::vector<std::vector<double>> offsets;  // [class][dim]
  std::vector<std::string> style_tokens;     // 4 content symbols
};

struct ProfileItem {
  std::vector<double> item;
  int label = -1;
  ProfileEntry entry;
};

struct TaskInstance {
  std::string task_id;
  TaskKind kind = TaskKind::classification;
  std::string user_id;
  std::vector<double> item;
  std::string query;
  std::vector<ProfileItem> profile;  // chronological, newest last
  std::string gold;
  int gold_label = -1;

  [[nodiscard]] std::vector<ProfileEntry> profile_entries() const {
    std::vector<ProfileEntry> out;
    out.reserve(profile.size());
    for (const auto& p : profile) out.push_back(p.entry);
    return out;
  }
};

struct OracleResponse {
  std::string chain;   // tagged reasoning, without think markers
  std::string answer;

  [[nodiscard]] std::string text(const FormatMarkers& m = {}) const {
    return m.open + chain + m.close + " " + answer;
  }
};

inline std::string class_symbol(int c) { return "c" + std::to_string(c); }
inline std::string content_symbol(int i) { return "w" + std::to_string(i); }
inline std::string item_symbol(int dim, bool positive) {
  return "d" + std::to_string(dim) + (positive ? "p" : "n");
}

class SynthEnv {
 public:
  static constexpr int kStyleLength = 4;

  SynthEnv() = default;

  explicit SynthEnv(EnvConfig cfg) : cfg_(cfg) {
    if (cfg_.num_classes < 2 || cfg_.item_dim < 1 || cfg_.content_vocab < kStyleLength + 3 ||
        cfg_.num_users < 1 || cfg_.profile_k < 1 || cfg_.history_len < cfg_.profile_k) {
      throw std::invalid_argument("EnvConfig: invalid dimensions");
    }
    Rng rng(derive_seed(cfg_.seed, 0x70726F74));
    std::normal_distribution<double> normal(0.0, cfg_.prototype_scale);
    prototypes_.assign(static_cast<std::size_t>(cfg_.num_classes), std::vector<double>(static_cast<std::size_t>(cfg_.item_dim)));
    for (auto& row : prototypes_)
      for (auto& v : row) v = normal(rng);
    for (int u = 0; u < cfg_.num_users; ++u) {
      Rng urng(derive_seed(cfg_.seed, 0x75736572, static_cast<std::uint64_t>(u)));
      auto user = sample_user(urng);
      user.user_id = "u" + std::to_string(u);
      users_.push_back(std::move(user));
    }
  }

  [[nodiscard]] const EnvConfig& config() const { return cfg_; }
  [[nodiscard]] const std::vector<std::vector<double>>& prototypes() const { return prototypes_; }
  [[nodiscard]] const std::vector<SynthUser>& users() const { return users_; }

  [[nodiscard]] const SynthUser& user(std::string_view id) const {
    for (const auto& u : users_) {
      if (u.user_id == id) return u;
    }
    throw std::out_of_range("unknown user '" + std::string(id) + "'");
  }

  /// Fresh user with offsets ~ N(0, user_offset_scale^2) and a random style.
  [[nodiscard]] SynthUser sample_user(Rng& rng) const {
    SynthUser u;
    u.user_id = "u" + std::to_string(rng() % 1000000);
    std::normal_distribution<double> normal(0.0, cfg_.user_offset_scale);
    u.offsets.assign(static_cast<std::size_t>(cfg_.num_classes), std::vector<double>(static_cast<std::size_t>(cfg_.item_dim)));
    for (auto& row : u.offsets)
      for (auto& v : row) v = normal(rng);
    std::vector<int> pool(static_cast<std::size_t>(cfg_.content_vocab - 1));
    std::iota(pool.begin(), pool.end(), 1);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int i = 0; i < kStyleLength; ++i) u.style_tokens.push_back(content_symbol(pool[static_cast<std::size_t>(i)]));
    return u;
  }

  [[nodiscard]] std::vector<double> sample_item(Rng& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> x(static_cast<std::size_t>(cfg_.item_dim));
    for (auto& v : x) v = normal(rng);
    return x;
  }

  /// argmax_c (W_c + U_c) . x; pass nullptr for the population rule.
  [[nodiscard]] int label(const SynthUser* user, const std::vector<double>& x) const {
    int best = 0;
    double best_score = -INFINITY;
    for (int c = 0; c < cfg_.num_classes; ++c) {
      double s = 0.0;
      for (int d = 0; d < cfg_.item_dim; ++d) {
        const auto ci = static_cast<std::size_t>(c), di = static_cast<std::size_t>(d);
        s += (prototypes_[ci][di] + (user ? user->offsets[ci][di] : 0.0)) * x[di];
      }
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    return best;
  }

  [[nodiscard]] std::vector<std::string> item_tokens(const std::vector<double>& x) const {
    std::vector<std::string> out;
    for (int d = 0; d < cfg_.item_dim; ++d) out.push_back(item_symbol(d, x[static_cast<std::size_t>(d)] >= 0.0));
    return out;
  }

  /// Strongest item coordinate as a single symbol.
  [[nodiscard]] std::string salient_item_token(const std::vector<double>& x) const {
    int best = 0;
    for (int d = 1; d < cfg_.item_dim; ++d) {
      if (std::abs(x[static_cast<std::size_t>(d)]) > std::abs(x[static_cast<std::size_t>(best)])) best = d;
    }
    return item_symbol(best, x[static_cast<std::size_t>(best)] >= 0.0);
  }

  /// Two content symbols determined by the item's sign pattern.
  [[nodiscard]] std::vector<std::string> topic_tokens(const std::vector<double>& x) const {
    std::uint64_t pattern = 0;
    for (int d = 0; d < cfg_.item_dim; ++d) pattern = pattern * 2 + (x[static_cast<std::size_t>(d)] >= 0.0 ? 1 : 0);
    const auto m = static_cast<std::uint64_t>(cfg_.content_vocab - 1);
    return {content_symbol(static_cast<int>(1 + pattern % m)), content_symbol(static_cast<int>(1 + (pattern * 5 + 3) % m))};
  }

  [[nodiscard]] std::vector<std::string> population_style() const {
    std::vector<std::string> out;
    for (int i = 0; i < kStyleLength; ++i) out.push_back(content_symbol(i + 1));
    return out;
  }

  [[nodiscard]] std::string query_text(TaskKind kind, const std::vector<double>& x) const {
    auto toks = item_tokens(x);
    toks.insert(toks.begin(), kind == TaskKind::classification ? "classify" : "describe");
    return render_symbols(toks);
  }

  [[nodiscard]] std::string gold_text(TaskKind kind, const SynthUser* user, const std::vector<double>& x) const {
    if (kind == TaskKind::classification) return class_symbol(label(user, x));
    auto toks = topic_tokens(x);
    const auto style = user ? user->style_tokens : population_style();
    toks.insert(toks.end(), style.begin(), style.end());
    return render_symbols(toks);
  }

  /// One task for `user`: a fresh history, the k-item profile picked by
  /// `retrieval`, and a query item labelled by the user's rule.
  [[nodiscard]] TaskInstance sample_task(const SynthUser& user, Rng& rng, int k, Retrieval retrieval,
                                         TaskKind kind = TaskKind::classification) const {
    if (k < 1) throw std::invalid_argument("sample_task: k must be >= 1");
    const int history = std::max(cfg_.history_len, k);
    std::vector<ProfileItem> hist;
    hist.reserve(static_cast<std::size_t>(history));
    for (int i = 0; i < history; ++i) {
      ProfileItem p;
      p.item = sample_item(rng);
      p.label = label(&user, p.item);
      p.entry = {query_text(kind, p.item), gold_text(kind, &user, p.item)};
      hist.push_back(std::move(p));
    }
    TaskInstance t;
    t.kind = kind;
    t.user_id = user.user_id;
    t.item = sample_item(rng);
    t.query = query_text(kind, t.item);
    t.gold_label = label(&user, t.item);
    t.gold = gold_text(kind, &user, t.item);
    if (retrieval == Retrieval::recency) {
      t.profile.assign(hist.end() - k, hist.end());
    } else {
      std::vector<std::size_t> idx(hist.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(k));
      std::sort(idx.begin(), idx.end());
      for (auto i : idx) t.profile.push_back(hist[i]);
    }
    return t;
  }

  /// Deterministic task stream: task i of stream `stream` depends only on
  /// (seed, stream, i).
  [[nodiscard]] std::vector<TaskInstance> make_tasks(std::size_t n, std::uint64_t stream) const {
    std::vector<TaskInstance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(cfg_.seed, 0x7461736B ^ (stream << 20), i));
      const auto& u = users_[static_cast<std::size_t>(rng() % users_.size())];
      const auto kind = uniform01(rng) < cfg_.generation_fraction ? TaskKind::generation : TaskKind::classification;
      auto t = sample_task(u, rng, cfg_.profile_k, cfg_.retrieval, kind);
      t.task_id = "s" + std::to_string(stream) + "-" + std::to_string(i);
      out.push_back(std::move(t));
    }
    return out;
  }

  /// Answer the user's rule (profile visible) or the population rule (hidden).
  [[nodiscard]] std::string answer_for(const TaskInstance& t, bool show_profile) const {
    if (show_profile) return t.gold;
    return gold_text(t.kind, nullptr, t.item);
  }

  /// Minimal valid tagged chain plus answer. With the profile hidden the
  /// examine step is skipped and the population answer is given.
  [[nodiscard]] OracleResponse oracle_responder(const TaskInstance& t, bool show_profile = true) const {
    const std::string answer = answer_for(t, show_profile);
    const auto answer_syms = symbolize(answer);
    std::vector<std::string> s;
    auto span = [&](const std::string& tag, const std::string& body) {
      s.push_back("<" + tag + ">");
      s.push_back(body);
      s.push_back("</" + tag + ">");
    };
    span("analyze_input", salient_item_token(t.item));
    if (show_profile && !t.profile.empty()) span("examine_examples", profile_evidence(t));
    span("identify_patterns", t.kind == TaskKind::classification ? answer_syms.front() : answer_syms.back());
    span("make_decision", answer_syms.front());
    return {render_symbols(s), answer};
  }

  /// Label of the profile item most similar to the query (or its first
  /// response token for generation).
  [[nodiscard]] std::string profile_evidence(const TaskInstance& t) const {
    if (t.profile.empty()) return content_symbol(0);
    std::size_t best = 0;
    double best_sim = -INFINITY;
    for (std::size_t j = 0; j < t.profile.size(); ++j) {
      const double s = cosine(t.profile[j].item, t.item);
      if (s > best_sim) {
        best_sim = s;
        best = j;
      }
    }
    if (t.kind == TaskKind::classification) return class_symbol(t.profile[best].label);
    return symbolize(t.profile[best].entry.response).back();
  }

  static double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
  }

  // Serialization: one JSON object per line; first line is the world header.
  [[nodiscard]] std::string dump_jsonl() const {
    nlohmann::json header = {{"type", "world"},
                             {"num_classes", cfg_.num_classes},
                             {"item_dim", cfg_.item_dim},
                             {"content_vocab", cfg_.content_vocab},
                             {"prototype_scale", cfg_.prototype_scale},
                             {"user_offset_scale", cfg_.user_offset_scale},
                             {"num_users", cfg_.num_users},
                             {"history_len", cfg_.history_len},
                             {"profile_k", cfg_.profile_k},
                             {"retrieval", to_string(cfg_.retrieval)},
                             {"generation_fraction", cfg_.generation_fraction},
                             {"seed", cfg_.seed},
                             {"prototypes", prototypes_}};
    std::string out = header.dump() + "\n";
    for (const auto& u : users_) {
      nlohmann::json j = {{"type", "user"}, {"user_id", u.user_id}, {"offsets", u.offsets}, {"style_tokens", u.style_tokens}};
      out += j.dump() + "\n";
    }
    return out;
  }

  static SynthEnv load_jsonl(std::istream& in) {
    SynthEnv env;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.at("type") == "world") {
        env.cfg_.num_classes = j.at("num_classes");
        env.cfg_.item_dim = j.at("item_dim");
        env.cfg_.content_vocab = j.at("content_vocab");
        env.cfg_.prototype_scale = j.at("prototype_scale");
        env.cfg_.user_offset_scale = j.at("user_offset_scale");
        env.cfg_.num_users = j.at("num_users");
        env.cfg_.history_len = j.at("history_len");
        env.cfg_.profile_k = j.at("profile_k");
        env.cfg_.retrieval = retrieval_from_string(j.at("retrieval").get<std::string>());
        env.cfg_.generation_fraction = j.at("generation_fraction");
        env.cfg_.seed = j.at("seed");
        env.prototypes_ = j.at("prototypes").get<std::vector<std::vector<double>>>();
        have_header = true;
      } else if (j.at("type") == "user") {
        SynthUser u;
        u.user_id = j.at("user_id");
        u.offsets = j.at("offsets").get<std::vector<std::vector<double>>>();
        u.style_tokens = j.at("style_tokens").get<std::vector<std::string>>();
        env.users_.push_back(std::move(u));
      } else {
        throw std::runtime_error("environment dump: unknown record type");
      }
    }
    if (!have_header) throw std::runtime_error("environment dump: missing world header");
    return env;
  }

 private:
  EnvConfig cfg_;
  std::vector<std::vector<double>> prototypes_;
  std::vector<SynthUser> users_;
};

}  // namespace tagpr
