#include "haloroute/stats.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "haloroute/parallel.hpp"
#include "haloroute/rng.hpp"
#include "haloroute/tensor.hpp"

namespace haloroute {

double AuditResult::identity_residual() const {
  return std::abs(total - (global_share + (1.0 - global_share) * local_gain));
}

AuditResult audit(double l_raw, double l_glob, double l_hyb) {
  if (!(l_raw > 0.0) || !(l_glob > 0.0) || !std::isfinite(l_raw) || !std::isfinite(l_glob)) {
    throw NumericError("audit needs positive raw and global losses");
  }
  if (!(l_hyb >= 0.0) || !std::isfinite(l_hyb)) throw NumericError("audit needs a non-negative hybrid loss");
  AuditResult r;
  r.global_share = 1.0 - l_glob / l_raw;
  r.local_gain = 1.0 - l_hyb / l_glob;
  r.total = 1.0 - l_hyb / l_raw;
  return r;
}

double nearest_rank_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw NumericError("percentile of an empty sample");
  if (!(q > 0.0 && q <= 100.0)) throw ConfigError("percentile must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

double median(std::vector<double> v) {
  if (v.empty()) throw NumericError("median of an empty sample");
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> paired_ratios(std::span<const double> method, std::span<const double> raw) {
  if (method.size() != raw.size()) {
    throw ConfigError("paired ratios: " + std::to_string(method.size()) + " method runs vs " +
                      std::to_string(raw.size()) + " raw runs");
  }
  std::vector<double> out(method.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(raw[i] > 0.0)) throw NumericError("raw loss must be positive");
    out[i] = method[i] / raw[i];
  }
  return out;
}

double median_of_ratios(std::span<const double> method, std::span<const double> raw) {
  return median(paired_ratios(method, raw));
}

double ratio_of_medians(std::span<const double> method, std::span<const double> raw) {
  if (method.size() != raw.size()) throw ConfigError("ratio of medians: length mismatch");
  return median({method.begin(), method.end()}) / median({raw.begin(), raw.end()});
}

Interval bootstrap_median_ci(std::span<const double> values, int replicates, double alpha,
                             std::uint64_t seed, int workers) {
  if (values.empty()) throw NumericError("bootstrap of an empty sample");
  if (replicates < 1) throw ConfigError("bootstrap needs at least one replicate");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  std::vector<double> medians(static_cast<std::size_t>(replicates));
  parallel_for(replicates, workers, [&](int r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    std::vector<double> draw(values.size());
    for (double& d : draw) d = values[rng.below(values.size())];
    medians[static_cast<std::size_t>(r)] = median(std::move(draw));
  });
  return {nearest_rank_percentile(medians, 50.0 * alpha),
          nearest_rank_percentile(medians, 100.0 * (1.0 - 0.5 * alpha))};
}

double sign_test_floor(int n) {
  if (n < 1) throw ConfigError("sign test needs n >= 1");
  return std::min(1.0, std::ldexp(2.0, -n));
}

double sign_test_p(int successes, int n) {
  if (n < 1 || successes < 0 || successes > n) throw ConfigError("sign test: bad counts");
  const int tail = std::min(successes, n - successes);
  double p = 0.0;
  double c = 1.0;  // C(n, i)
  for (int i = 0; i <= tail; ++i) {
    p += c;
    c = c * (n - i) / (i + 1);
  }
  return std::min(1.0, 2.0 * std::ldexp(p, -n));
}

double gini(std::span<const double> x) {
  if (x.empty()) throw NumericError("gini of an empty sample");
  std::vector<double> s(x.begin(), x.end());
  double total = 0.0;
  for (double v : s) {
    if (v < 0.0 || !std::isfinite(v)) throw NumericError("gini needs finite non-negative values");
    total += v;
  }
  if (total == 0.0) return 0.0;
  std::sort(s.begin(), s.end());
  const auto n = static_cast<double>(s.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) acc += (2.0 * static_cast<double>(i) - n + 1.0) * s[i];
  // sum_ij |x_i - x_j| = 2 acc
  return acc / (n * total);
}

double gini_brute_force(std::span<const double> x) {
  double total = 0.0, pairs = 0.0;
  for (double a : x) {
    total += a;
    for (double b : x) pairs += std::abs(a - b);
  }
  if (total == 0.0) return 0.0;
  return pairs / (2.0 * static_cast<double>(x.size()) * total);
}

double topq_share(std::span<const double> x, double q) {
  if (x.empty()) throw NumericError("top-q share of an empty sample");
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("q must lie in (0, 1]");
  std::vector<double> s(x.begin(), x.end());
  double total = 0.0;
  for (double v : s) total += v;
  if (!(total > 0.0)) throw NumericError("top-q share needs a positive total");
  std::sort(s.begin(), s.end(), std::greater<>());
  const auto count = static_cast<std::size_t>(std::ceil(q * static_cast<double>(s.size()) - 1e-9));
  double top = 0.0;
  for (std::size_t i = 0; i < count; ++i) top += s[i];
  return top / total;
}

nlohmann::json ConcentrationReport::to_json() const {
  return {{"gini", gini}, {"top20_share", top20}, {"shares", shares}};
}

ConcentrationReport concentration(std::span<const double> block_errors) {
  ConcentrationReport r;
  double total = 0.0;
  for (double e : block_errors) total += e;
  if (!(total > 0.0)) throw NumericError("concentration of an all-zero error map");
  for (double e : block_errors) r.shares.push_back(e / total);
  r.gini = gini(r.shares);
  r.top20 = topq_share(r.shares, 0.2);
  return r;
}

}  // namespace haloroute
