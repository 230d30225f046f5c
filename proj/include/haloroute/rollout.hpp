#pragma once

// Deployment pipeline: host -> global -> score -> route -> refine -> feed back.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "haloroute/bench.hpp"
#include "haloroute/correctors.hpp"
#include "haloroute/diagnostics.hpp"
#include "haloroute/routing.hpp"
#include "haloroute/stats.hpp"

namespace haloroute {

/// Which part of the stack runs: host only, host + global, or the full
/// routed hybrid.
enum class RolloutMode { Raw, Global, Hybrid };
std::string to_string(RolloutMode m);

struct RolloutConfig {
  int horizon = 10;
  double budget = 1.0;  // k / B
  Policy policy = Policy::InnovationKeg;
  bool hann = true;
  RiskConfig risk;
  std::uint64_t seed = 0;
  bool keep_fields = false;

  void validate() const;
  nlohmann::json to_json() const;
  static RolloutConfig from_json(const nlohmann::json& j);
};

/// Frozen components. `global` and `local` may be null for the modes that
/// do not need them; `static_scores` only for the static policy.
struct Components {
  const SurrogateHost* host = nullptr;
  const GlobalCorrector* global = nullptr;
  const LocalRefiner* local = nullptr;
  BlockPartition partition;
  const std::vector<double>* static_scores = nullptr;

  /// Throws GeometryError when the refiner, corrector and partition disagree.
  void check(RolloutMode mode) const;
};

struct StepOutput {
  Tensor next;
  Tensor x_g;
  std::vector<int> selected;
};

/// One deployment step with k blocks routed. `x_star` is only read by the
/// oracle policy; `random_seed` only by the random policy.
StepOutput rollout_step(const Tensor& x_t, const Components& c, int k, Policy policy,
                        const HannWindow& win, const RiskConfig& risk,
                        const Tensor* x_star = nullptr, std::uint64_t random_seed = 0);

struct RolloutResult {
  std::vector<double> step_losses;  // UV relative L2 per step
  double loss = 0.0;                // mean over steps
  std::vector<std::vector<int>> selected;
  std::vector<Tensor> fields;       // per step, only with keep_fields
  Tensor final_state;
};

/// ||P_uv(pred - truth)|| / ||P_uv(truth)||.
double uv_relative_l2(const Tensor& pred, const Tensor& truth);

RolloutResult run_rollout(const Trajectory& traj, int t0, const RolloutConfig& cfg,
                          const Components& c, RolloutMode mode);

/// Time-averaged block risk over (trajectory, t0) training samples.
std::vector<double> static_mask(std::span<const Trajectory> train, const Components& c,
                                std::span<const int> t0_pool, const RiskConfig& risk);

struct RunRecord {
  int trajectory = 0;
  int t0 = 0;
  RolloutResult raw;
  RolloutResult global;
  RolloutResult hybrid;
  AuditResult audit;
};

struct EvaluationSummary {
  int runs = 0;
  double raw_ratio = 1.0;
  double global_ratio = 0.0;
  double hybrid_ratio = 0.0;
  Interval global_ci;
  Interval hybrid_ci;
  double sign_p_hybrid = 1.0;
  double sign_floor = 1.0;
  AuditResult protocol_audit;  // on the median losses
  double median_global_share = 0.0;
  double median_local_gain = 0.0;
  double mean_jaccard = 1.0;
  double raw_gini = 0.0;       // first-step per-block error concentration
  double global_gini = 0.0;

  nlohmann::json to_json() const;
};

struct Evaluation {
  std::vector<RunRecord> runs;
  EvaluationSummary summary;
};

struct EvalOptions {
  int bootstrap_replicates = 10000;
  double alpha = 0.05;
  int workers = 1;
};

/// Raw, global-only and hybrid rollouts for every (trajectory, t0) pair.
Evaluation evaluate(std::span<const Trajectory> trajs, std::span<const int> t0_pool,
                    const RolloutConfig& cfg, const Components& c, const EvalOptions& opt = {});

/// Mean first-step Gini of per-block squared velocity error.
double first_step_gini(const Trajectory& traj, int t0, const Components& c, RolloutMode mode);

struct SweepPoint {
  double budget = 0.0;
  int k = 0;
  std::vector<double> losses;
  double median_ratio = 0.0;
  Interval ci;
};

struct BudgetSweep {
  std::vector<double> raw_losses;
  std::vector<SweepPoint> points;
};

/// Hybrid rollouts at each budget fraction, reusing the same refiner;
/// ratios are paired against the raw host over the same runs.
BudgetSweep budget_sweep(std::span<const Trajectory> trajs, std::span<const int> t0_pool,
                         std::span<const double> fractions, const RolloutConfig& cfg,
                         const Components& c, const EvalOptions& opt = {});

/// Hex bitmask of a block set (bit b of the B-bit mask, most significant
/// nibble first).
std::string block_mask(std::span<const int> selected, int block_count);

nlohmann::json rollout_to_json(const RolloutResult& r, int block_count);
nlohmann::json evaluation_to_json(const Evaluation& e, int block_count);
nlohmann::json sweep_to_json(const BudgetSweep& s);

}  // namespace haloroute
