// tagpr: score, pipeline, train, eval and report subcommands.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tagpr/cli.hpp"

namespace {

tagpr::RunConfig load_config(const std::string& path, const std::string& run_dir) {
  auto cfg = path.empty() ? tagpr::parse_run_config(nlohmann::json::object()) : tagpr::load_run_config(path);
  if (!run_dir.empty()) cfg.run_dir = run_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = tagpr::cli;
  CLI::App app{"Tag-structured reasoning: data pipeline, reward scoring, training and evaluation"};
  app.require_subcommand(1);
  std::string config_path, run_dir;
  app.add_option("-c,--config", config_path, "JSON run configuration (defaults when omitted)");
  app.add_option("-r,--run-dir", run_dir, "Run directory (overrides run_dir from the config)");

  auto* score = app.add_subcommand("score", "Append reward breakdowns to dataset records");
  std::string input = "-", output = "-";
  bool manifest_registry = false;
  score->add_option("input", input, "Input JSONL ('-' for stdin)");
  score->add_option("-o,--output", output, "Output JSONL ('-' for stdout)");
  score->add_flag("--manifest-registry", manifest_registry, "Validate tags against the registry in <run_dir>/manifest.json");

  auto* pipeline = app.add_subcommand("pipeline", "Build the tagged reasoning-chain dataset");

  auto* train = app.add_subcommand("train", "Train one stage");
  std::string stage;
  train->add_option("--stage", stage, "prmu, sft, rl-guided or rl-explore")
      ->required()
      ->check(CLI::IsMember({"prmu", "sft", "rl-guided", "rl-explore"}));

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on held-out tasks");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint path, stage name, 'oracle' or 'uniform'")->required();

  auto* report = app.add_subcommand("report", "Compare checkpoints on one task set");
  std::vector<std::string> checkpoints;
  report->add_option("checkpoints", checkpoints, "Checkpoints (default: sft rl-guided rl-explore)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kUsage;
  }

  tagpr::RunConfig cfg;
  try {
    cfg = load_config(config_path, run_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kUsage;
  }

  if (score->parsed()) {
    std::optional<tagpr::TagRegistry> registry;
    const int rc = cli::guarded(std::cerr, [&] {
      if (manifest_registry) {
        const auto path = cfg.run_dir / "manifest.json";
        cli::require_artifact(path, "pipeline manifest");
        const auto m = cli::read_json_file(path).at("registry");
        registry = tagpr::TagRegistry(m.at("names").get<std::vector<std::string>>(), m.at("min_tag_count").get<int>());
      }
      return 0;
    });
    if (rc != 0) return rc;
    std::ifstream fin;
    std::ofstream fout;
    if (input != "-") {
      fin.open(input);
      if (!fin) {
        std::cerr << "error: cannot open " << input << '\n';
        return cli::kUsage;
      }
    }
    if (output != "-") fout.open(output);
    return cli::cmd_score(cfg, input == "-" ? std::cin : fin, output == "-" ? std::cout : fout, std::cerr, registry);
  }
  if (pipeline->parsed()) return cli::cmd_pipeline(cfg, std::cout, std::cerr);
  if (train->parsed()) {
    return cli::guarded(std::cerr, [&] { return cli::cmd_train(cfg, cli::stage_from_string(stage), std::cout, std::cerr); });
  }
  if (eval->parsed()) return cli::cmd_eval(cfg, checkpoint, std::cout, std::cerr);
  if (report->parsed()) return cli::cmd_report(cfg, checkpoints, std::cout, std::cerr);
  return cli::kUsage;
}
