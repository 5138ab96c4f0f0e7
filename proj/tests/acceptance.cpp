// Acceptance run: one PASS/FAIL line per criterion. Tolerances and time
// limits are fixed here; the exit status is nonzero if any criterion fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "formula_cases.hpp"
#include "policy_fixtures.hpp"
#include "prmu_fixtures.hpp"
#include "tagpr/cli.hpp"

using namespace tagpr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

int failures = 0;

void report(int id, const std::string& title, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.ok = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0 && secs >= limit_s) {
    o.ok = false;
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("over time limit");
  }
  if (!o.ok) ++failures;
  std::printf("%s criterion %d: %s [%.2fs%s]%s%s\n", o.ok ? "PASS" : "FAIL", id, title.c_str(), secs,
              limit_s > 0 ? (" / limit " + std::to_string(static_cast<int>(limit_s)) + "s").c_str() : "",
              o.detail.empty() ? "" : " -- ", o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig desk_config(const fs::path& run_dir) {
  auto cfg = load_run_config(fs::path(TAGPR_SAMPLES_DIR) / "desk.json");
  cfg.run_dir = run_dir;
  return cfg;
}

struct EndToEnd {
  double seconds = 0;
  double acc_sft = 0, acc_guided = 0, acc_explore = 0;
  double compliance_guided = 0;
  double len_sft = 0, len_guided = 0, len_explore = 0;
  double freq_sum_error = 0;
  int num_classes = 0;
};

EndToEnd run_desk(const fs::path& dir) {
  EndToEnd e;
  const auto cfg = desk_config(dir);
  e.num_classes = cfg.env.num_classes;
  std::ostringstream out, err;
  const auto t0 = std::chrono::steady_clock::now();
  for (auto stage : {cli::Stage::prmu, cli::Stage::sft, cli::Stage::rl_guided, cli::Stage::rl_explore}) {
    if (cli::cmd_train(cfg, stage, out, err) != cli::kOk) throw std::runtime_error("training failed: " + err.str());
  }
  if (cli::cmd_report(cfg, {"sft", "rl-guided", "rl-explore"}, out, err) != cli::kOk) {
    throw std::runtime_error("report failed: " + err.str());
  }
  e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto reports = cli::read_json_file(dir / "report.json").at("reports");
  auto acc = [&](std::size_t i) { return reports.at(i).at("metrics").at("classification").at("accuracy").get<double>(); };
  auto len = [&](std::size_t i) { return reports.at(i).at("chain_length").at("mean").get<double>(); };
  e.acc_sft = acc(0);
  e.acc_guided = acc(1);
  e.acc_explore = acc(2);
  e.len_sft = len(0);
  e.len_guided = len(1);
  e.len_explore = len(2);
  e.compliance_guided = reports.at(1).at("tag_compliance");
  for (const auto& rb : reports) {
    double sum = 0;
    for (const auto& [tag, f] : rb.at("tag_frequency").items()) sum += f.get<double>();
    e.freq_sum_error = std::max(e.freq_sum_error, std::abs(sum - 1.0));
  }
  return e;
}

}  // namespace

int main() {
  const auto scratch = fs::temp_directory_path() / ("tagpr_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  report(1, "formula oracle suite (abs tol 1e-9)", 5, [] {
    Outcome o;
    const auto cs = cases::formula_cases();
    for (const auto& c : cs) o.require(c.ok, c.name);
    o.require(!cs.empty(), "no cases");
    if (o.ok) o.detail = std::to_string(cs.size()) + " cases";
    return o;
  });

  report(2, "composite reward in [-1.6, 1], foundation reward in [-1, 1] over 10000 tuples", 5, [] {
    Outcome o;
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double lo = 1e9, hi = -1e9, flo = 1e9, fhi = -1e9;
    for (int i = 0; i < 10000; ++i) {
      RewardBreakdown b;
      b.r_v = u(rng);
      b.r_f = rng() % 2 ? 1.0 : 0.0;
      b.r_rep = -u(rng);
      b.r_tag = rng() % 2 ? 0.0 : -1.0;
      b.r_prmu = u(rng);
      const double c = composite_reward(b), f = foundation_reward(b);
      lo = std::min(lo, c);
      hi = std::max(hi, c);
      flo = std::min(flo, f);
      fhi = std::max(fhi, f);
    }
    o.require(lo >= -1.6 && hi <= 1.0, "composite out of range");
    o.require(flo >= -1.0 && fhi <= 1.0, "foundation out of range");
    o.detail += "composite [" + fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "], foundation [" + fmt("%.4f", flo) + ", " +
                fmt("%.4f", fhi) + "]";
    return o;
  });

  report(3, "PRMU gradient vs central differences, 100 cases, rel err < 1e-4", 30, [] {
    Outcome o;
    std::mt19937_64 rng(3);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      auto p = fixtures::random_prmu_problem(rng);
      worst = std::max(worst, fixtures::prmu_gradient_error(p));
    }
    o.require(worst < 1e-4, "max rel err " + fmt("%.3g", worst));
    if (o.ok) o.detail = "max rel err " + fmt("%.3g", worst);
    return o;
  });

  report(4, "PRMU user specificity: sign flip, held-out accuracy >= 0.95, untrained 0.50 +- 0.05", 120, [] {
    Outcome o;
    const auto d = fixtures::opposite_users_dataset(32, 2000, 200, 4);
    const double untrained = pairwise_accuracy(PrmuModel(32), d.heldout);
    PrmuTrainConfig cfg;
    cfg.epochs = 100;
    cfg.lr = 2.0;
    const auto model = train_prmu(PrmuModel(32), d.train, cfg).model;
    const double trained = pairwise_accuracy(model, d.heldout);
    const double ga = score_gap(model, {"alice", d.shared_a, d.shared_b});
    const double gb = score_gap(model, {"bob", d.shared_a, d.shared_b});
    o.require(std::abs(untrained - 0.5) <= 0.05, "untrained " + fmt("%.3f", untrained));
    o.require(trained >= 0.95, "trained " + fmt("%.3f", trained));
    o.require(ga > 0 && gb < 0, "no sign flip");
    if (o.ok) {
      o.detail = "untrained " + fmt("%.3f", untrained) + ", trained " + fmt("%.3f", trained) + ", gaps " +
                 fmt("%+.3f", ga) + " / " + fmt("%+.3f", gb);
    }
    return o;
  });

  report(5, "GSPO algebra: unit ratio at old policy, zero gradient on equal rewards, clip example", 0, [] {
    Outcome o;
    std::mt19937_64 rng(5);
    double worst_ratio = 0, worst_grad = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const auto tp = fixtures::random_tiny_policy(rng);
      auto groups = fixtures::sampled_groups(tp, 5, rng);
      gspo_objective(tp.params, tp.params, groups, ClipRange{});
      for (const auto& g : groups)
        for (double s : g.ratios) worst_ratio = std::max(worst_ratio, std::abs(s - 1.0));
      auto flat = fixtures::sampled_groups(tp, 5, rng, true);
      auto moved = tp.params;
      for (auto& v : moved.theta) v += 0.05;
      const auto og = gspo_objective(moved, tp.params, flat, ClipRange{});
      double norm = 0;
      for (double g : og.grad) norm += g * g;
      worst_grad = std::max(worst_grad, std::sqrt(norm));
    }
    const double s = gspo_ratio_from_logprobs(-5.0 + 0.004, -5.0, 4);
    const double clipped = clipped_surrogate(s, 1.0, ClipRange{0.0003, 0.0004}).first;
    o.require(worst_ratio <= 1e-12, "ratio deviation " + fmt("%.3g", worst_ratio));
    o.require(worst_grad < 1e-12, "equal-reward gradient norm " + fmt("%.3g", worst_grad));
    o.require(std::abs(s - 1.0010005) < 1e-9, "ratio " + fmt("%.10f", s));
    o.require(clipped == 1.0004, "clipped value " + fmt("%.17g", clipped));
    if (o.ok) o.detail = "s = " + fmt("%.7f", s) + ", min(s, 1.0004) = " + fmt("%.4f", clipped);
    return o;
  });

  report(6, "SFT gradient vs central differences, 100 cases, rel err < 1e-4", 30, [] {
    Outcome o;
    std::mt19937_64 rng(6);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      auto tp = fixtures::random_tiny_policy(rng);
      worst = std::max(worst, fixtures::sft_gradient_error(tp));
    }
    o.require(worst < 1e-4, "max rel err " + fmt("%.3g", worst));
    if (o.ok) o.detail = "max rel err " + fmt("%.3g", worst);
    return o;
  });

  EndToEnd e2e;
  bool e2e_ok = false;
  report(7, "desk-scale SFT -> guided -> exploratory training (samples/desk.json)", 600, [&] {
    Outcome o;
    e2e = run_desk(scratch / "desk");
    e2e_ok = true;
    const double random_baseline = 1.0 / e2e.num_classes;
    o.require(e2e.compliance_guided >= 0.99, "(a) compliance " + fmt("%.4f", e2e.compliance_guided));
    o.require(e2e.acc_guided >= random_baseline + 0.30, "(b) guided accuracy below 1/K + 0.30");
    o.require(e2e.acc_guided >= e2e.acc_sft + 0.05, "(b) guided accuracy below SFT + 0.05");
    o.require(e2e.acc_explore >= e2e.acc_guided - 0.02, "(c) exploratory stage lost more than 0.02");
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("accuracy sft ") + fmt("%.4f", e2e.acc_sft) + ", guided " +
                fmt("%.4f", e2e.acc_guided) + ", explore " + fmt("%.4f", e2e.acc_explore) + ", 1/K " +
                fmt("%.2f", random_baseline) + ", guided compliance " + fmt("%.4f", e2e.compliance_guided);
    return o;
  });

  report(8, "pipeline determinism and soundness with mock clients", 60, [&] {
    Outcome o;
    ::unsetenv("TAGPR_ENDPOINT");
    std::ostringstream out, err;
    for (const char* name : {"pipe_a", "pipe_b"}) {
      if (cli::cmd_pipeline(desk_config(scratch / name), out, err) != cli::kOk) {
        throw std::runtime_error("pipeline failed: " + err.str());
      }
    }
    const auto a = read_all(scratch / "pipe_a" / "dataset.jsonl");
    o.require(!a.empty(), "empty dataset");
    o.require(a == read_all(scratch / "pipe_b" / "dataset.jsonl"), "datasets differ");
    const auto manifest = cli::read_json_file(scratch / "pipe_a" / "manifest.json");
    const auto& reg_json = manifest.at("registry");
    const TagRegistry reg(reg_json.at("names").get<std::vector<std::string>>(), reg_json.at("min_tag_count").get<int>());
    std::istringstream lines(a);
    std::size_t n = 0, valid = 0, above = 0;
    for (std::string line; std::getline(lines, line);) {
      const auto rec = nlohmann::json::parse(line);
      ++n;
      valid += validate(parse_chain(rec.at("chain").get<std::string>()), reg).ok();
      above += rec.at("provenance").at("judge_composite").get<int>() > 15;
    }
    o.require(valid == n, std::to_string(n - valid) + " records fail validation");
    o.require(above == n, "record with judge composite <= 15 kept");
    const auto& st = manifest.at("stages");
    std::vector<std::size_t> survival;
    for (const char* k : {"generated", "accuracy_pass", "judge_pass", "tagged", "format_pass"}) survival.push_back(st.at(k));
    o.require(std::is_sorted(survival.rbegin(), survival.rend()), "survival counts increase");
    o.require(survival.back() == n, "format_pass count differs from dataset size");

    // the threshold itself, on composites 15 and 16
    PipelineConfig pc;
    pc.retry = {1, std::chrono::milliseconds(0)};
    PipelineStats ps;
    std::size_t kept15 = 0, kept16 = 0;
    for (int total : {15, 16}) {
      MockClient judge(
          [total](std::string_view, Rng&) {
            return nlohmann::json{{"logical_consistency", 4}, {"factual_accuracy", 4}, {"completeness", 4},
                                  {"conciseness", total - 12}}
                .dump();
          },
          1);
      PipelineRecord r;
      r.task_id = "t";
      (total == 15 ? kept15 : kept16) = judge_filter({r}, judge, pc, ps).size();
    }
    o.require(kept15 == 0 && kept16 == 1, "judge threshold not strict");
    if (o.ok) {
      o.detail = "survival";
      for (auto s : survival) o.detail += " " + std::to_string(s);
      o.detail += ", " + std::to_string(reg.names().size()) + " primary tags";
    }
    return o;
  });

  report(9, "k-means: inertia non-increasing, two-cloud recovery, k=1 mean", 10, [] {
    Outcome o;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n01;
    std::vector<std::vector<double>> pts(1000, std::vector<double>(8));
    for (auto& p : pts)
      for (auto& v : p) v = n01(rng);
    const auto res = kmeans(pts, 9, 9);
    for (std::size_t i = 1; i < res.inertia_trace.size(); ++i) {
      o.require(res.inertia_trace[i] <= res.inertia_trace[i - 1], "inertia rose at step " + std::to_string(i));
    }
    std::vector<std::vector<double>> clouds;
    std::normal_distribution<double> tight(0.0, 0.1);
    for (int i = 0; i < 200; ++i) clouds.push_back({(i % 2 ? 10.0 : -10.0) + tight(rng), tight(rng)});
    const auto two = kmeans(clouds, 2, 1);
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      if ((two.assignments[i] == two.assignments[0]) != (i % 2 == 0)) {
        o.require(false, "cloud point " + std::to_string(i) + " misassigned");
        break;
      }
    }
    const auto one = kmeans(pts, 1, 3);
    double worst = 0;
    for (std::size_t d = 0; d < 8; ++d) {
      double mean = 0;
      for (const auto& p : pts) mean += p[d];
      mean /= static_cast<double>(pts.size());
      worst = std::max(worst, std::abs(one.centroids[0][d] - mean));
    }
    o.require(worst <= 1e-12, "k=1 centroid off by " + fmt("%.3g", worst));
    if (o.ok) o.detail = std::to_string(res.inertia_trace.size()) + " Lloyd steps";
    return o;
  });

  report(10, "analysis: tag frequencies sum to 1, trained chain length <= SFT chain length", 0, [&] {
    Outcome o;
    if (!e2e_ok) {
      o.require(false, "needs the criterion 7 run");
      return o;
    }
    o.require(e2e.freq_sum_error <= 1e-12, "frequency sum error " + fmt("%.3g", e2e.freq_sum_error));
    o.require(e2e.len_guided <= e2e.len_sft, "guided chains longer than SFT chains");
    o.require(e2e.len_explore <= e2e.len_sft, "exploratory chains longer than SFT chains");
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("mean chain length sft ") + fmt("%.2f", e2e.len_sft) +
                ", guided " + fmt("%.2f", e2e.len_guided) + ", explore " + fmt("%.2f", e2e.len_explore) +
                " (reduction " + fmt("%.1f", 100.0 * (1.0 - e2e.len_explore / e2e.len_sft)) + "%, reported only)";
    return o;
  });

  std::error_code ec;
  fs::remove_all(scratch, ec);
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
