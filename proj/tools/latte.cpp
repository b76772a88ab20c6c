// Command-line front end for the trajectory pipeline.
//
//   latte <stage> --config run.json [--seed N] [--dry-run]
//
// Stages: ingest, build-states, train-predictor, forecast, train-bridge,
// emit, diagnose, simulate. Each writes its artifacts plus a <stage>.json
// summary into paths.out_dir and prints that summary to stdout.
//
// Exit codes: 0 success, 1 internal error (or a failed simulate gate),
// 2 validation error (bad config/input), 3 missing or stale dependency.
// LATTE_THREADS caps worker threads; results do not depend on it.

#include "latte/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct StageArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool dry_run = false;
};

int run_stage(const std::string& stage, const StageArgs& args) {
  latte::RunConfig cfg = latte::load_run_config(args.config_path);
  if (args.seed_set) cfg.apply_master_seed(args.seed);

  if (cfg.out_dir.empty())
    throw latte::Error::validation("config: paths.out_dir is required");

  // Hold the output-directory lock for anything that writes.
  std::optional<latte::DirLock> lock;
  if (!args.dry_run) lock.emplace(cfg.out_dir);

  nlohmann::json summary;
  if (stage == "ingest")
    summary = latte::run_ingest(cfg, args.dry_run);
  else if (stage == "build-states")
    summary = latte::run_build_states(cfg, args.dry_run);
  else if (stage == "train-predictor")
    summary = latte::run_train_predictor(cfg, args.dry_run);
  else if (stage == "forecast")
    summary = latte::run_forecast(cfg, args.dry_run);
  else if (stage == "train-bridge")
    summary = latte::run_train_bridge(cfg, args.dry_run);
  else if (stage == "emit")
    summary = latte::run_emit(cfg, args.dry_run);
  else if (stage == "diagnose")
    summary = latte::run_diagnose(cfg, args.dry_run);
  else if (stage == "simulate")
    summary = latte::run_simulate(cfg, args.dry_run);
  else
    throw latte::Error::internal("unmapped stage " + stage);

  std::cout << summary.dump(2) << "\n";
  if (stage == "simulate" && !args.dry_run && !summary.at("all_pass").get<bool>()) {
    std::cerr << "simulate: oracle checks FAILED\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"peer-anchored preference trajectory pipeline"};
  app.require_subcommand(1);

  const char* stages[] = {"ingest",       "build-states", "train-predictor",
                          "forecast",     "train-bridge", "emit",
                          "diagnose",     "simulate"};
  const char* blurbs[] = {
      "validate sessions + embeddings, filter users, fix the holdout split",
      "anchor each split user's sessions into relative states",
      "fit (or configure) the next-state predictor on cached states",
      "predict each user's held-out state and score it",
      "fit the state-to-token bridge on bridge-position states",
      "map forecasts through the bridge into injection bundles",
      "collapse/leakage/smoothness metrics over the run's artifacts",
      "synthetic-data oracle checks (anchoring + drift estimators)"};

  StageArgs args;
  for (std::size_t i = 0; i < 8; ++i) {
    CLI::App* sub = app.add_subcommand(stages[i], blurbs[i]);
    sub->add_option("--config", args.config_path, "run configuration JSON")
        ->required();
    sub->add_option("--seed", args.seed, "override the master seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    sub->add_flag("--dry-run", args.dry_run,
                  "validate config and list planned reads/writes; write nothing");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage problems are validation errors
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    return run_stage(stage, args);
  } catch (const latte::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case latte::Error::Kind::validation:
        return 2;
      case latte::Error::Kind::dependency:
        return 3;
      default:
        return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
