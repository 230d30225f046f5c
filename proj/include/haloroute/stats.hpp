#pragma once

// Stage-wise audit, paired-ratio aggregation and concentration measures.

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"

namespace haloroute {

struct AuditResult {
  double global_share = 0.0;   // A = 1 - L_glob / L_raw
  double local_gain = 0.0;     // J_loc = 1 - L_hyb / L_glob
  double total = 0.0;          // 1 - L_hyb / L_raw

  /// |total - (A + (1 - A) J_loc)|
  double identity_residual() const;
};

/// Throws NumericError unless raw and global losses are positive and the
/// hybrid loss is non-negative.
AuditResult audit(double l_raw, double l_glob, double l_hyb);

/// Nearest-rank percentile (q in (0, 100]) of an unsorted sample.
double nearest_rank_percentile(std::vector<double> values, double q);

/// Median; even counts average the middle pair. Empty raises NumericError.
double median(std::vector<double> v);

/// Paired per-run ratios method / raw.
std::vector<double> paired_ratios(std::span<const double> method, std::span<const double> raw);
double median_of_ratios(std::span<const double> method, std::span<const double> raw);
double ratio_of_medians(std::span<const double> method, std::span<const double> raw);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the median: `replicates` resamples with
/// replacement, nearest-rank alpha/2 and 1-alpha/2 bounds. Replicate r
/// draws from its own derived seed, so the result is independent of how
/// replicates are spread over workers.
Interval bootstrap_median_ci(std::span<const double> values, int replicates = 10000,
                             double alpha = 0.05, std::uint64_t seed = 0, int workers = 1);

/// Smallest attainable two-sided sign-test p-value with n pairs: 2 / 2^n, at most 1.
double sign_test_floor(int n);
/// Exact two-sided sign-test p-value for `successes` out of n (ties dropped).
double sign_test_p(int successes, int n);

/// sum_ij |x_i - x_j| / (2 n sum x); 0 for an all-zero input.
double gini(std::span<const double> x);
double gini_brute_force(std::span<const double> x);

/// Share of the total held by the ceil(q n) largest entries.
double topq_share(std::span<const double> x, double q);

struct ConcentrationReport {
  std::vector<double> shares;
  double gini = 0.0;
  double top20 = 0.0;

  nlohmann::json to_json() const;
};

/// Normalizes non-negative per-block errors to shares.
ConcentrationReport concentration(std::span<const double> block_errors);

}  // namespace haloroute
