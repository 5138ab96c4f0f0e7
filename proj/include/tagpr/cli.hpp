#pragma once

// Subcommand implementations behind tools/tagpr.cpp. Each command returns
// a process exit code; failures are reported on `err`.
//   0 success, 2 usage/config error, 3 missing prerequisite,
//   4 remote-client failure (1 for anything unexpected)

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tagpr/clients.hpp"
#include "tagpr/config.hpp"
#include "tagpr/pipeline.hpp"
#include "tagpr/policy.hpp"
#include "tagpr/prmu.hpp"
#include "tagpr/report.hpp"
#include "tagpr/reward.hpp"
#include "tagpr/synth_env.hpp"
#include "tagpr/training.hpp"

namespace tagpr::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kMissingPrerequisite = 3, kRemoteFailure = 4 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Task streams. Distinct streams keep training, RL prompts, evaluation and
// the pipeline on disjoint task draws.
inline constexpr std::uint64_t kSftStream = 1;
inline constexpr std::uint64_t kRlStream = 2;
inline constexpr std::uint64_t kPipelineStream = 3;
inline constexpr std::uint64_t kEvalStream = 9;

/// Exclusive lock on a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
    fs::create_directories(run_dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST) {
        throw UsageError("run directory " + run_dir.string() + " is locked by another invocation (" + path_.string() + ")");
      }
      throw std::runtime_error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

/// Runs `fn` and maps exceptions to exit codes.
template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const PrerequisiteError& e) {
    err << "error: " << e.what() << '\n';
    return kMissingPrerequisite;
  } catch (const ClientError& e) {
    err << "error: remote client: " << e.what() << '\n';
    return kRemoteFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

inline void write_file(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out.flush()) throw std::runtime_error("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

/// The run's world: env.jsonl in the run directory if present, otherwise a
/// fresh world from the config (saved when `persist`).
inline SynthEnv load_or_create_env(const RunConfig& cfg, bool persist) {
  const auto path = cfg.run_dir / "env.jsonl";
  if (fs::exists(path)) {
    std::ifstream in(path);
    auto env = SynthEnv::load_jsonl(in);
    const auto& a = env.config();
    const auto& b = cfg.env;
    if (a.num_classes != b.num_classes || a.item_dim != b.item_dim || a.content_vocab != b.content_vocab ||
        a.num_users != b.num_users || a.seed != b.seed) {
      throw UsageError(path.string() + " was created with a different env configuration");
    }
    return env;
  }
  SynthEnv env(cfg.env);
  if (persist) write_file(path, env.dump_jsonl());
  return env;
}

inline void require_artifact(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw PrerequisiteError("missing " + what + " (" + path.string() + ")");
}

inline PolicyParams load_policy(const fs::path& path, const RunConfig& cfg, const SynthEnv& env) {
  auto params = policy_from_json(read_json_file(path), cfg.markers);
  const auto expected = Vocabulary::build(cfg.registry, env.config(), cfg.markers);
  if (params.vocab.symbols() != expected.symbols() || params.layout.prompt != prompt_feature_dim(env.config())) {
    throw UsageError("checkpoint " + path.string() + " does not match the configured registry and environment");
  }
  return params;
}

inline std::optional<PrmuModel> load_prmu_if_present(const RunConfig& cfg) {
  const auto path = cfg.run_dir / "prmu.json";
  if (!fs::exists(path)) return std::nullopt;
  return prmu_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// score

/// Appends a reward breakdown to every dataset record read from `in`.
/// `registry` overrides the configured registry (for datasets tagged with a
/// pipeline-derived registry).
inline int cmd_score(const RunConfig& cfg, std::istream& in, std::ostream& out, std::ostream& err,
                     const std::optional<TagRegistry>& registry = std::nullopt) {
  return guarded(err, [&] {
    auto base = cfg.reward_context();
    if (registry) base.registry = *registry;
    const auto prmu = load_prmu_if_present(cfg);
    std::string line;
    std::size_t line_no = 0;
    std::ostringstream buffer;  // nothing is emitted unless every line is valid
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::trim(line).empty()) continue;
      auto rec = nlohmann::json::parse(line, nullptr, false);
      auto fail = [&](const std::string& msg) {
        throw UsageError("line " + std::to_string(line_no) + ": " + msg);
      };
      if (rec.is_discarded()) fail("malformed JSON");
      if (!rec.is_object()) fail("record is not a JSON object");
      for (const char* key : {"task_kind", "chain", "answer", "gold"}) {
        if (!rec.contains(key) || !rec[key].is_string()) fail(std::string("missing string field '") + key + "'");
      }
      TaskKind kind = TaskKind::classification;
      try {
        kind = task_kind_from_string(rec["task_kind"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        fail(e.what());
      }
      RewardContext ctx = base;
      if (prmu) {
        if (!rec.contains("user_id") || !rec.contains("query") || !rec.contains("profile")) {
          fail("PRMU scoring needs user_id, query and profile");
        }
        std::vector<ProfileEntry> profile;
        try {
          for (const auto& e : rec["profile"]) profile.push_back({e.at("query"), e.at("response")});
        } catch (const nlohmann::json::exception&) {
          fail("profile entries need query and response");
        }
        const std::string user = rec["user_id"], query = rec["query"];
        ctx.prmu = [&prmu, user, query, profile](std::string_view chain, std::string_view answer) {
          return sigmoid(score(*prmu, user, featurize(user, query, profile, chain, answer, prmu->dim)));
        };
      }
      const std::string text =
          cfg.markers.open + rec["chain"].get<std::string>() + cfg.markers.close + " " + rec["answer"].get<std::string>();
      const auto b = score_response(text, kind, rec["gold"].get<std::string>(), ctx);
      rec["reward"] = {{"r_v", b.r_v},     {"r_f", b.r_f},           {"r_rep", b.r_rep},
                       {"r_tag", b.r_tag}, {"r_prmu", b.r_prmu},     {"composite", b.composite},
                       {"foundation", b.foundation}};
      buffer << rec.dump() << '\n';
    }
    out << buffer.str();
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// pipeline

/// n classification and n generation instances, drawn from a dedicated
/// task stream.
inline std::vector<TaskInstance> pipeline_instances(const SynthEnv& env, std::size_t n, std::uint64_t stream) {
  std::vector<TaskInstance> out;
  const auto& c = env.config();
  for (auto kind : {TaskKind::classification, TaskKind::generation}) {
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(c.seed, 0x70697065 ^ (stream << 20) ^ (kind == TaskKind::generation ? 1ULL << 40 : 0), i));
      const auto& u = env.users()[static_cast<std::size_t>(rng() % env.users().size())];
      auto t = env.sample_task(u, rng, c.profile_k, c.retrieval, kind);
      t.task_id = std::string(kind == TaskKind::classification ? "p" : "g") + std::to_string(stream) + "-" + std::to_string(i);
      out.push_back(std::move(t));
    }
  }
  return out;
}

inline int cmd_pipeline(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunLock lock(cfg.run_dir);
    const auto env = load_or_create_env(cfg, true);
    const auto instances = pipeline_instances(env, cfg.pipeline.instances_per_task, kPipelineStream);

    std::unique_ptr<GenerationClient> generator, judge, tagger;
    std::map<std::string, TaskInstance> by_id;
    const auto remote = HttpClientConfig::from_environment();
    if (remote) {
      generator = std::make_unique<HttpClient>(*remote);
      judge = std::make_unique<HttpClient>(*remote);
      tagger = std::make_unique<HttpClient>(*remote);
    } else {
      for (const auto& t : instances) by_id.emplace(t.task_id, t);
      generator = std::make_unique<MockClient>(mock::reasoner(env, by_id), derive_seed(cfg.pipeline.seed, 1));
      judge = std::make_unique<MockClient>(mock::judge(), derive_seed(cfg.pipeline.seed, 2));
      tagger = std::make_unique<MockClient>(mock::tagger(), derive_seed(cfg.pipeline.seed, 3));
    }

    const auto dataset = cfg.run_dir / "dataset.jsonl";
    const auto res = run_pipeline(instances, {generator.get(), judge.get(), tagger.get()}, cfg.pipeline, dataset);
    const nlohmann::json manifest = {{"config", cfg.source},
                                     {"clients", remote ? "remote" : "mock"},
                                     {"stages", stats_to_json(res.stats)},
                                     {"registry", {{"names", res.registry.names()}, {"min_tag_count", res.registry.min_tag_count()}}},
                                     {"complete", res.stats.client_failures() == 0}};
    write_file(cfg.run_dir / "manifest.json", manifest.dump(2) + "\n");
    write_file(cfg.run_dir / "sample_report.txt", sample_report(res.records, cfg.pipeline.sample_report_size, cfg.pipeline.seed));
    out << "instances " << res.stats.instances << " -> generated " << res.stats.generated << " -> accurate "
        << res.stats.accuracy_pass << " -> judged " << res.stats.judge_pass << " -> tagged " << res.stats.tagged
        << " -> formatted " << res.stats.format_pass << "\nwrote " << dataset.string() << '\n';
    if (res.stats.client_failures() > 0) {
      err << "error: " << res.stats.client_failures() << " client requests failed after retries; manifest marks the run partial\n";
      return static_cast<int>(kRemoteFailure);
    }
    return static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// train

enum class Stage { prmu, sft, rl_guided, rl_explore };

inline Stage stage_from_string(std::string_view s) {
  if (s == "prmu") return Stage::prmu;
  if (s == "sft") return Stage::sft;
  if (s == "rl-guided") return Stage::rl_guided;
  if (s == "rl-explore") return Stage::rl_explore;
  throw UsageError("unknown stage '" + std::string(s) + "' (expected prmu, sft, rl-guided or rl-explore)");
}

inline int cmd_train(const RunConfig& cfg, Stage stage, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunLock lock(cfg.run_dir);
    const auto& dir = cfg.run_dir;
    // Prerequisites are checked before anything is written.
    if (stage == Stage::rl_guided) {
      require_artifact(dir / "sft.json", "sft checkpoint");
      require_artifact(dir / "prmu.json", "prmu checkpoint");
    } else if (stage == Stage::rl_explore) {
      require_artifact(dir / "sft.json", "sft checkpoint");
      require_artifact(dir / "rl-guided.json", "rl-guided checkpoint");
    }
    const auto env = load_or_create_env(cfg, true);

    if (stage == Stage::prmu) {
      auto pairs = build_prp_dataset(env, oracle_generator(env), cfg.prmu.prp_pairs);
      const auto pqp = build_pqp_dataset(env, noisy_oracle_generator(env), cfg.prmu.pqp_pairs, cfg.prmu.pqp_candidates);
      pairs.insert(pairs.end(), pqp.begin(), pqp.end());
      const auto res = train_prmu(PrmuModel(cfg.prmu.dim), pairs, cfg.prmu.train);
      if (!res.model.finite()) throw std::runtime_error("prmu training diverged");
      std::string csv = "stage,epoch,loss\n";
      for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) {
        std::ostringstream row;
        row << std::setprecision(17) << "prmu," << e << ',' << res.epoch_loss[e] << '\n';
        csv += row.str();
      }
      write_file(dir / "prmu.json", to_json(res.model).dump() + "\n");
      write_file(dir / "metrics_prmu.csv", csv);
      out << "prmu: " << pairs.size() << " pairs, loss " << res.epoch_loss.front() << " -> " << res.epoch_loss.back() << '\n';
      return static_cast<int>(kOk);
    }

    if (stage == Stage::sft) {
      const auto vocab = Vocabulary::build(cfg.registry, env.config(), cfg.markers);
      PolicyParams params(vocab, prompt_feature_dim(env.config()), cfg.markers);
      const auto tasks = env.make_tasks(cfg.sft.examples, kSftStream);
      const auto prompts = encode_prompts(env, tasks);
      const auto curve = run_sft(params, oracle_sft_examples(env, vocab, prompts, cfg.markers), cfg.sft.train);
      std::string csv = "stage,epoch,loss\n";
      for (std::size_t e = 0; e < curve.size(); ++e) {
        std::ostringstream row;
        row << std::setprecision(17) << "sft," << e << ',' << curve[e] << '\n';
        csv += row.str();
      }
      write_file(dir / "sft.json", to_json(params, "sft").dump() + "\n");
      write_file(dir / "metrics_sft.csv", csv);
      out << "sft: " << tasks.size() << " examples, loss " << curve.front() << " -> " << curve.back() << '\n';
      return static_cast<int>(kOk);
    }

    const bool guided = stage == Stage::rl_guided;
    auto params = load_policy(dir / (guided ? "sft.json" : "rl-guided.json"), cfg, env);
    std::optional<PrmuModel> prmu;
    if (guided) prmu = prmu_from_json(read_json_file(dir / "prmu.json"));
    const auto tasks = env.make_tasks(cfg.rl.prompts, kRlStream);
    const auto prompts = encode_prompts(env, tasks);
    auto gspo = cfg.rl.gspo;
    gspo.epochs = guided ? cfg.rl.guided_epochs : cfg.rl.exploratory_epochs;
    const auto rl = guided ? RlStage::guided : RlStage::exploratory;
    const auto res = train_stage(params, prompts, rl, cfg.reward_context(), prmu ? &*prmu : nullptr, gspo);
    const std::string name(to_string(rl));
    write_file(dir / (name + ".json"), to_json(params, name).dump() + "\n");
    write_file(dir / ("metrics_" + name + ".csv"), metrics_csv(res.log));
    if (!res.log.empty()) {
      out << name << ": " << res.log.size() << " batches, final mean reward " << res.log.back().mean_reward
          << ", tag compliance " << res.log.back().tag_compliance << '\n';
    }
    return static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// eval / report

/// "oracle", "uniform", a checkpoint path, or a stage name resolved to
/// <run_dir>/<name>.json.
inline fs::path resolve_checkpoint(const RunConfig& cfg, const std::string& spec) {
  if (fs::exists(spec)) return spec;
  const auto in_run = cfg.run_dir / (spec + ".json");
  if (fs::exists(in_run)) return in_run;
  throw PrerequisiteError("missing checkpoint '" + spec + "'");
}

inline ReportBundle evaluate_spec(const RunConfig& cfg, const SynthEnv& env, const std::vector<TaskInstance>& tasks,
                                  const std::string& spec, const PrmuModel* prmu) {
  const auto base = cfg.reward_context();
  if (spec == "oracle") return evaluate(env, tasks, oracle_text_responder(env, cfg.markers), base, prmu, cfg.eval.seed, spec);
  if (spec == "uniform") return evaluate(env, tasks, uniform_responder(env, cfg.markers), base, prmu, cfg.eval.seed, spec);
  const auto params = load_policy(resolve_checkpoint(cfg, spec), cfg, env);
  const SamplingConfig sampling{cfg.eval.temperature, 1.0, cfg.rl.gspo.max_len};
  return evaluate(env, tasks, policy_responder(params, sampling), base, prmu, cfg.eval.seed, spec);
}

inline std::string file_label(std::string spec) {
  spec = fs::path(spec).stem().string();
  for (auto& ch : spec) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  }
  return spec;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunLock lock(cfg.run_dir);
    const auto env = load_or_create_env(cfg, false);
    const auto prmu = load_prmu_if_present(cfg);
    const auto tasks = env.make_tasks(cfg.eval.tasks, kEvalStream);
    const auto rb = evaluate_spec(cfg, env, tasks, checkpoint, prmu ? &*prmu : nullptr);
    const auto label = file_label(checkpoint);
    const auto j = to_json(rb);
    write_file(cfg.run_dir / ("eval_" + label + ".json"), j.dump(2) + "\n");
    write_file(cfg.run_dir / ("eval_" + label + ".csv"), to_csv(rb));
    out << j.dump(2) << '\n';
    return static_cast<int>(kOk);
  });
}

/// Evaluates several checkpoints on one task set and tabulates accuracy,
/// tag compliance and chain length relative to the first.
inline int cmd_report(const RunConfig& cfg, std::vector<std::string> checkpoints, std::ostream& out,
                      std::ostream& err) {
  return guarded(err, [&] {
    RunLock lock(cfg.run_dir);
    if (checkpoints.empty()) {
      for (const char* s : {"sft", "rl-guided", "rl-explore"}) {
        if (fs::exists(cfg.run_dir / (std::string(s) + ".json"))) checkpoints.emplace_back(s);
      }
      if (checkpoints.empty()) throw PrerequisiteError("missing checkpoints: no sft, rl-guided or rl-explore checkpoint in " + cfg.run_dir.string());
    }
    const auto env = load_or_create_env(cfg, false);
    const auto prmu = load_prmu_if_present(cfg);
    const auto tasks = env.make_tasks(cfg.eval.tasks, kEvalStream);
    nlohmann::json bundles = nlohmann::json::array();
    std::ostringstream table;
    table << std::left << std::setw(14) << "checkpoint" << std::right << std::setw(10) << "accuracy" << std::setw(10)
          << "macro_f1" << std::setw(12) << "compliance" << std::setw(10) << "mean_len" << std::setw(12) << "len_change"
          << '\n';
    std::string csv = "checkpoint,accuracy,macro_f1,tag_compliance,mean_chain_length,median_chain_length,length_change\n";
    double first_len = 0.0;
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      const auto rb = evaluate_spec(cfg, env, tasks, checkpoints[i], prmu ? &*prmu : nullptr);
      bundles.push_back(to_json(rb));
      double acc = 0.0, f1 = 0.0;
      if (auto it = rb.metrics.find("classification"); it != rb.metrics.end() && it->second.labels) {
        acc = it->second.labels->accuracy;
        f1 = it->second.labels->macro_f1;
      }
      if (i == 0) first_len = rb.chain_length.mean;
      const double change = first_len > 0.0 ? rb.chain_length.mean / first_len - 1.0 : 0.0;
      table << std::left << std::setw(14) << rb.label << std::right << std::fixed << std::setprecision(4)
            << std::setw(10) << acc << std::setw(10) << f1 << std::setw(12) << rb.tag_compliance << std::setw(10)
            << std::setprecision(2) << rb.chain_length.mean << std::setw(11) << change * 100.0 << "%\n";
      std::ostringstream row;
      row << std::setprecision(17) << rb.label << ',' << acc << ',' << f1 << ',' << rb.tag_compliance << ','
          << rb.chain_length.mean << ',' << rb.chain_length.median << ',' << change << '\n';
      csv += row.str();
    }
    write_file(cfg.run_dir / "report.json", nlohmann::json{{"reports", bundles}}.dump(2) + "\n");
    write_file(cfg.run_dir / "report.csv", csv);
    out << table.str();
    return static_cast<int>(kOk);
  });
}

}  // namespace tagpr::cli
