#pragma once

// Label-free block scoring and budgeted selection.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haloroute/fields.hpp"

namespace haloroute {

struct RiskConfig {
  double lambda_ke = 0.05;

  void validate() const;
};

/// r = |du| + |dv| + lambda_ke (|dK/dx| + |dK/dy|) with K = (u_g^2 + v_g^2) / 2,
/// derivatives by periodic central differences. Returns [1, 1, H, W].
Tensor risk_map(const Tensor& x_t, const Tensor& x_g, const RiskConfig& cfg);

/// Indices of the k largest scores, ascending. Ties go to the lower index.
std::vector<int> select_topk(std::span<const double> scores, int k);

/// Number of blocks for a budget fraction: round(fraction * B).
int budget_blocks(double fraction, int block_count);

/// Per-pixel energy of the velocity field above half the maximum resolved
/// wavenumber. [1, 1, H, W].
Tensor spectral_hf_map(const Tensor& x_g);

/// Single-level periodic 2-D db4 transform of u and v; |LH| + |HL| + |HH|
/// summed over both channels and repeated over each 2x2 pixel cell.
Tensor wavelet_hf_map(const Tensor& x_g);

/// db4 analysis pair (8 taps each) used by wavelet_hf_map.
const std::array<double, 8>& db4_lowpass();
const std::array<double, 8>& db4_highpass();

/// Per-block L2 norm of the true velocity residual x* - x_g. Uses labels.
std::vector<double> oracle_scores(const Tensor& x_g, const Tensor& x_star, const BlockPartition& p);

/// Block-mean risk of one state pair.
std::vector<double> risk_scores(const Tensor& x_t, const Tensor& x_g, const BlockPartition& p,
                                const RiskConfig& cfg);

/// Mean of per-sample block scores. Summation runs in sample order after
/// sorting the per-sample vectors, so the result does not depend on the
/// order samples are supplied in.
std::vector<double> average_scores(std::vector<std::vector<double>> per_sample);

/// |S_t n S_t+1| / |S_t u S_t+1| for consecutive sets (two empty sets: 1).
std::vector<double> jaccard_stability(std::span<const std::vector<int>> sets);
double jaccard(std::span<const int> a, std::span<const int> b);

enum class Policy { InnovationKeg, SpectralHf, WaveletHf, Random, Oracle, Static };

Policy parse_policy(const std::string& name);
std::string to_string(Policy p);
const std::vector<std::string>& policy_names();

/// Inputs a policy may consult at one rollout step.
struct PolicyContext {
  const Tensor* x_t = nullptr;
  const Tensor* x_g = nullptr;
  const Tensor* x_star = nullptr;               // oracle only
  const std::vector<double>* static_scores = nullptr;  // static only
  RiskConfig risk;
  std::uint64_t random_seed = 0;                // random only, per step
};

/// Block scores for `policy`. Oracle without truth or static without a
/// mask raises DependencyError.
std::vector<double> policy_scores(Policy policy, const PolicyContext& ctx, const BlockPartition& p);

}  // namespace haloroute
