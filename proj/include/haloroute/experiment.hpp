#pragma once

// Experiment plumbing behind the command-line harness: one config tree,
// a fixed on-disk layout under `out`, and one function per subcommand.
//
// Layout:
//   data/{train,test}/             datasets
//   checkpoints/<stage>.{bin,json} weights, <stage>.manifest.json lineage
//   state/<stage>/                 resumable loop state
//   logs/<stage>.jsonl             metrics
//   results/                       everything a human reads

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "haloroute/bench.hpp"
#include "haloroute/correctors.hpp"
#include "haloroute/rollout.hpp"

namespace haloroute {

struct ExperimentConfig {
  std::string experiment = "default";
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";

  SolverConfig solver;
  SurrogateHostConfig host;
  int train_trajectories = 12;
  int test_trajectories = 4;
  int frames = 16;

  GlobalCorrectorConfig global;
  LocalRefinerConfig local;
  TrainConfig train;

  RolloutConfig rollout;
  std::vector<int> eval_t0_pool{3};
  int bootstrap_replicates = 10000;
  double alpha = 0.05;
  int workers = 1;
  bool truth_available = true;

  std::vector<double> budget_grid{0.0, 0.125, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> lambda_grid{0.0, 0.025, 0.05, 0.1, 0.2};
  std::vector<int> data_sizes{4, 8, 12};

  /// Pushes the top-level seed into every component seed (the frozen
  /// host keeps its own).
  void derive_seeds();
  void validate() const;
  nlohmann::json to_json() const;
  /// `seed` is mandatory; unknown top-level keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  std::filesystem::path data_dir(const std::string& split) const { return out / "data" / split; }
  std::filesystem::path checkpoint(const std::string& stage) const { return out / "checkpoints" / stage; }
  std::filesystem::path results_dir() const { return out / "results"; }
  EvalOptions eval_options() const;
};

enum class Stage { Global, LocalPatch, LocalAr };
Stage parse_stage(const std::string& s);
std::string to_string(Stage s);

struct TrainOptions {
  int stop_after = -1;  // simulate an interruption
  bool fresh = false;   // discard saved loop state
};

/// Frozen components loaded from disk. Owns what `view` points at.
struct LoadedModels {
  SurrogateHost host;
  std::optional<GlobalCorrector> global;
  std::optional<LocalRefiner> local;
  std::vector<double> static_scores;
  nlohmann::json hashes;  // content hash per loaded input
  Components view;
};

/// Loads the host and any checkpoints present; `need` selects which are
/// required (DependencyError when missing).
std::unique_ptr<LoadedModels> load_models(const ExperimentConfig& cfg, RolloutMode need);

nlohmann::json cmd_gen_data(const ExperimentConfig& cfg);
nlohmann::json cmd_train(const ExperimentConfig& cfg, Stage stage, const TrainOptions& opt = {});
nlohmann::json cmd_evaluate(const ExperimentConfig& cfg);
nlohmann::json cmd_sweep(const ExperimentConfig& cfg, const std::string& axis);
nlohmann::json cmd_ablate(const ExperimentConfig& cfg, const std::string& which);
nlohmann::json cmd_audit(const ExperimentConfig& cfg, const std::filesystem::path& results);
nlohmann::json cmd_diagnose(const ExperimentConfig& cfg);

/// Writes `j` as indented text with a trailing newline via tmp + rename.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace haloroute
