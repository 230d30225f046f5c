#pragma once

// The two trainable correction stages and their training loops.
//
// GlobalCorrector maps (x_t, x_hat) to a clipped velocity residual that is
// added to the host forecast. LocalRefiner maps an 8-channel halo window of
// (x_t, x_g) to a residual whose center crop is written back into one
// block. Both are frozen after their stage; the host is never trained.

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "haloroute/bench.hpp"
#include "haloroute/fields.hpp"
#include "haloroute/nn.hpp"
#include "haloroute/stats.hpp"

namespace haloroute {

struct GlobalCorrectorConfig {
  int width = 16;
  int layers = 2;
  int modes = 8;
  int projection = 32;
  bool coordinates = true;
  double clip_bound = 1.0;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static GlobalCorrectorConfig from_json(const nlohmann::json& j);
};

class GlobalCorrector {
 public:
  GlobalCorrector(const GlobalCorrectorConfig& cfg, int height, int width);

  const GlobalCorrectorConfig& config() const { return cfg_; }
  double clip_bound() const { return cfg_.clip_bound; }
  void set_clip_bound(double c);
  int height() const { return height_; }
  int width() const { return width_; }

  struct Cache {
    nn::Sequential::Cache net;
    Tensor raw;  // pre-clip residual
  };

  /// Clipped [1, 2, H, W] velocity residual.
  Tensor residual(const Tensor& x_t, const Tensor& x_hat, Cache* cache = nullptr) const;
  /// x_g: x_hat with the residual added on (u, v); s1, s2 pass through.
  Tensor apply(const Tensor& x_t, const Tensor& x_hat) const;

  /// Backward of residual(): accumulates parameter gradients into `grads`
  /// (may be null when only input gradients are wanted) and adds input
  /// gradients into `d_x_t` and `d_x_hat` ([1, 4, H, W]).
  void backward(const Tensor& d_residual, const Cache& cache, nn::Gradients* grads,
                Tensor& d_x_t, Tensor& d_x_hat) const;

  nn::Sequential& net() { return net_; }
  const nn::Sequential& net() const { return net_; }
  nn::ParameterList parameters() { return net_.parameters(); }
  nn::ConstParameterList parameters() const { return net_.parameters(); }

 private:
  Tensor input(const Tensor& x_t, const Tensor& x_hat) const;

  GlobalCorrectorConfig cfg_;
  int height_;
  int width_;
  Tensor coords_;  // [1, 2, H, W]: sin x, sin y
  nn::Sequential net_;
};

struct LocalRefinerConfig {
  int width = 24;
  int depth = 3;
  int kernel = 3;
  int block = 8;
  int halo = 4;
  std::uint64_t seed = 2;

  nlohmann::json to_json() const;
  static LocalRefinerConfig from_json(const nlohmann::json& j);
};

class LocalRefiner {
 public:
  explicit LocalRefiner(const LocalRefinerConfig& cfg);

  const LocalRefinerConfig& config() const { return cfg_; }
  int window_side() const { return cfg_.block + 2 * cfg_.halo; }

  struct Cache {
    std::vector<nn::Sequential::Cache> samples;
  };

  /// Center-cropped residuals [N, 2, b, b] for windows [N, 8, S, S]. Each
  /// window is evaluated on its own, so a block's output never depends on
  /// which other windows share the call.
  Tensor forward(const Tensor& windows, Cache* cache = nullptr) const;
  /// Returns d(windows); accumulates parameter gradients when `grads` set.
  Tensor backward(const Tensor& d_crop, const Cache& cache, nn::Gradients* grads) const;

  nn::Sequential& net() { return net_; }
  const nn::Sequential& net() const { return net_; }
  nn::ParameterList parameters() { return net_.parameters(); }
  nn::ConstParameterList parameters() const { return net_.parameters(); }

 private:
  void require_windows(const Tensor& windows) const;

  LocalRefinerConfig cfg_;
  nn::Sequential net_;
};

/// Stacks the halo windows of the listed blocks into [N, 8, S, S].
Tensor extract_windows(const Tensor& x_t, const Tensor& x_g, const BlockPartition& p,
                       std::span<const int> blocks);

/// Writes win * delta_n into block blocks[n] of a copy of x_g.
Tensor write_blocks(const Tensor& x_g, const BlockPartition& p, std::span<const int> blocks,
                    const Tensor& deltas, const HannWindow& win);

/// 0..B-1.
std::vector<int> all_blocks(const BlockPartition& p);

/// Mean squared error on the velocity channels.
double velocity_mse(const Tensor& pred, const Tensor& truth);

enum class PatchWeighting { Uniform, Energy };
PatchWeighting parse_patch_weighting(const std::string& s);
std::string to_string(PatchWeighting w);

/// w_b = e_b / (max_b' e_b' + eps) for per-block residual energies e_b.
std::vector<double> energy_weights(std::span<const double> energies, double eps = 1e-12);

struct TrainConfig {
  // global stage
  int ar_depth = 5;
  std::vector<int> t0_pool_global{3, 5, 7, 10};
  int epochs_global = 40;
  double lr_global = 5e-4;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  int patience = 8;
  double validation_fraction = 0.1;

  // patch pretraining
  std::vector<int> t0_pool_patch{3, 5, 7, 10, 13};
  int patch_steps = 400;
  int patch_batch = 64;
  double lr_patch = 5e-4;
  int patch_eval_every = 50;
  PatchWeighting patch_weighting = PatchWeighting::Uniform;
  double eps = 1e-12;

  // hybrid AR fine-tuning
  std::vector<int> t0_pool_ar{3, 5, 7, 10};
  int epochs_ar = 30;
  double lr_ar = 1e-4;
  std::vector<int> curriculum_epochs{5, 10};  // depth switches 1 -> 2 -> ar_depth
  double aux_weight = 1e-4;
  int patience_ar = 10;

  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// AR depth used at epoch `epoch` of the hybrid stage.
int curriculum_depth(const TrainConfig& cfg, int epoch);

/// Splits [0, n) into (train, validation), validation = last
/// ceil(fraction * n) indices, at least one, at most n - 1.
std::pair<std::vector<int>, std::vector<int>> validation_split(int n, double fraction);

/// 95th nearest-rank percentile over calibration samples of
/// max |P_uv(x* - x_hat)| for single host steps from the t0 pool.
double clip_calibration(std::span<const Trajectory> data, const SurrogateHost& host,
                        std::span<const int> t0_pool, double percentile = 95.0);

/// Gradient buffers for an AR unroll; either may be absent.
struct UnrollGrads {
  nn::Gradients* global = nullptr;
  nn::Gradients* local = nullptr;
};

/// Loss of an N-step closed-loop rollout from `z0` against `truths`
/// (length N): sum over steps of velocity MSE, plus aux_weight * mean(delta^2)
/// per step when a refiner is present (dense, all blocks). Gradients are
/// back-propagated through the refiner, the global corrector and the host.
double ar_unroll_loss(const SurrogateHost& host, const GlobalCorrector& global,
                      const LocalRefiner* local, const BlockPartition* partition,
                      const HannWindow* window, const Tensor& z0, std::span<const Tensor> truths,
                      double aux_weight, UnrollGrads grads = {});

/// Receives one structured metrics record per logged event.
using MetricsSink = std::function<void(const nlohmann::json&)>;

/// Resumable training control. When `state_dir` is set, the loop restores
/// from it if a saved state exists and saves after every epoch (or eval
/// interval). `stop_after` simulates an interruption after that many
/// epochs/intervals in this invocation.
struct StageControl {
  MetricsSink log;
  std::filesystem::path state_dir;
  int stop_after = -1;
};

struct StageResult {
  double initial_validation = 0.0;
  double best_validation = 0.0;
  int epochs_run = 0;
  bool completed = true;
};

StageResult train_global(GlobalCorrector& global, std::span<const Trajectory> train,
                         const SurrogateHost& host, const TrainConfig& cfg,
                         const StageControl& control = {});

/// Validation loss of the global stage: mean over validation trajectories
/// and the t0 pool of the N-step AR loss.
double global_validation_loss(const GlobalCorrector& global, std::span<const Trajectory> data,
                              std::span<const int> indices, const SurrogateHost& host,
                              const TrainConfig& cfg);

struct PatchSample {
  Tensor windows;  // [B, 8, S, S]
  Tensor targets;  // [B, 2, b, b] post-global residual on each block
  std::vector<double> weights;
};

/// Dense patch data for one (trajectory, t0) pair.
PatchSample make_patch_sample(const Trajectory& traj, int t0, const SurrogateHost& host,
                              const GlobalCorrector& global, const BlockPartition& p,
                              PatchWeighting weighting, double eps);

/// Weighted patch loss sum_n w_n ||target_n - delta_n||^2 / (N * 2 b^2)
/// without the Hann factor; gradient w.r.t. the refiner when requested.
double patch_loss(const LocalRefiner& local, const Tensor& windows, const Tensor& targets,
                  std::span<const double> weights, nn::Gradients* grads);

StageResult train_local_patch(LocalRefiner& local, std::span<const Trajectory> train,
                              const SurrogateHost& host, const GlobalCorrector& global,
                              const TrainConfig& cfg, const StageControl& control = {});

StageResult train_local_ar(LocalRefiner& local, std::span<const Trajectory> train,
                           const SurrogateHost& host, const GlobalCorrector& global,
                           const TrainConfig& cfg, const StageControl& control = {});

/// Validation loss of the hybrid stage at full depth.
double hybrid_validation_loss(const LocalRefiner& local, std::span<const Trajectory> data,
                              std::span<const int> indices, const SurrogateHost& host,
                              const GlobalCorrector& global, const TrainConfig& cfg);

}  // namespace haloroute
