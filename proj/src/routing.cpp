#include "haloroute/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "haloroute/rng.hpp"
#include "haloroute/spectral.hpp"

namespace haloroute {

namespace {

// Periodic central differences on the [0, 2 pi) grid.
double ddx(const Tensor& f, int c, int i, int j) {
  const int w = f.width();
  const double h = 2.0 * std::numbers::pi / w;
  return (f.at(c, i, (j + 1) % w) - f.at(c, i, (j + w - 1) % w)) / (2.0 * h);
}

double ddy(const Tensor& f, int c, int i, int j) {
  const int n = f.height();
  const double h = 2.0 * std::numbers::pi / n;
  return (f.at(c, (i + 1) % n, j) - f.at(c, (i + n - 1) % n, j)) / (2.0 * h);
}

void require_pair(const Tensor& a, const Tensor& b, const char* what) {
  require_state_field(a, what);
  require_state_field(b, what);
  require_same_shape(a, b, what);
}

}  // namespace

void RiskConfig::validate() const {
  if (!(lambda_ke >= 0.0) || !std::isfinite(lambda_ke)) throw ConfigError("lambda_ke must be >= 0");
}

Tensor risk_map(const Tensor& x_t, const Tensor& x_g, const RiskConfig& cfg) {
  cfg.validate();
  require_pair(x_t, x_g, "risk_map");
  const int h = x_g.height(), w = x_g.width();
  Tensor ke(1, h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double u = x_g.at(0, i, j), v = x_g.at(1, i, j);
      ke.at(0, i, j) = 0.5 * (u * u + v * v);
    }
  }
  Tensor r(1, h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double innovation =
          std::abs(x_g.at(0, i, j) - x_t.at(0, i, j)) + std::abs(x_g.at(1, i, j) - x_t.at(1, i, j));
      r.at(0, i, j) = cfg.lambda_ke == 0.0
                          ? innovation
                          : innovation + cfg.lambda_ke * (std::abs(ddx(ke, 0, i, j)) +
                                                          std::abs(ddy(ke, 0, i, j)));
    }
  }
  return r;
}

std::vector<int> select_topk(std::span<const double> scores, int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 0 || k > n) {
    throw ConfigError("budget k=" + std::to_string(k) + " outside [0, " + std::to_string(n) + "]");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericError("non-finite block score");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

int budget_blocks(double fraction, int block_count) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("budget fraction must lie in [0, 1]");
  return static_cast<int>(std::lround(fraction * block_count));
}

Tensor spectral_hf_map(const Tensor& x_g) {
  require_state_field(x_g, "spectral_hf_map");
  const int h = x_g.height(), w = x_g.width();
  const SpectralGrid grid(h, w);
  const double cutoff = 0.5 * grid.kmax();
  Tensor out(1, h, w);
  std::vector<double> band(grid.size());
  for (int c = 0; c < kVelocityChannels; ++c) {
    Spectrum s = fft2(x_g.plane(c), h, w);
    for (std::size_t m = 0; m < s.size(); ++m) {
      if (grid.kmag()[m] <= cutoff) s[m] = 0.0;
    }
    ifft2_real(std::move(s), h, w, band);
    auto o = out.plane(0);
    for (std::size_t p = 0; p < band.size(); ++p) o[p] += band[p] * band[p];
  }
  return out;
}

const std::array<double, 8>& db4_lowpass() {
  static const std::array<double, 8> h{
      -0.010597401784997278, 0.032883011666982945, 0.030841381835986965, -0.18703481171888114,
      -0.02798376941698385,  0.6308807679295904,   0.7148465705525415,   0.23037781330885523};
  return h;
}

const std::array<double, 8>& db4_highpass() {
  // Quadrature mirror of the lowpass: g[n] = (-1)^(n+1) h[7 - n].
  static const std::array<double, 8> g = [] {
    std::array<double, 8> out{};
    const auto& h = db4_lowpass();
    for (int n = 0; n < 8; ++n) out[static_cast<std::size_t>(n)] = (n % 2 ? 1.0 : -1.0) * h[static_cast<std::size_t>(7 - n)];
    return out;
  }();
  return g;
}

namespace {

// One periodic analysis level along a strided line of length n. Output i
// sees samples 2i - 1 .. 2i + 6: the highpass taps carry their energy near
// t = 1.5, so this puts each detail coefficient over pixels 2i, 2i+1.
void analyze(const double* in, std::ptrdiff_t stride, int n, double* lo, double* hi,
             std::ptrdiff_t out_stride) {
  const auto& hl = db4_lowpass();
  const auto& hh = db4_highpass();
  for (int i = 0; i < n / 2; ++i) {
    double a = 0.0, d = 0.0;
    for (int t = 0; t < 8; ++t) {
      const int idx = ((2 * i + t - 1) % n + n) % n;
      const double x = in[idx * stride];
      a += hl[static_cast<std::size_t>(t)] * x;
      d += hh[static_cast<std::size_t>(t)] * x;
    }
    lo[i * out_stride] = a;
    hi[i * out_stride] = d;
  }
}

}  // namespace

Tensor wavelet_hf_map(const Tensor& x_g) {
  require_state_field(x_g, "wavelet_hf_map");
  const int h = x_g.height(), w = x_g.width();
  if (h % 2 || w % 2 || h < 8 || w < 8) throw GeometryError("wavelet_hf_map needs even sides >= 8");
  const int h2 = h / 2, w2 = w / 2;
  Tensor out(1, h, w);
  std::vector<double> row_lo(static_cast<std::size_t>(h) * w2), row_hi(row_lo.size());
  std::vector<double> ll(static_cast<std::size_t>(h2) * w2), lh(ll.size()), hl(ll.size()), hh(ll.size());
  for (int c = 0; c < kVelocityChannels; ++c) {
    const auto plane = x_g.plane(c);
    for (int i = 0; i < h; ++i) {
      analyze(plane.data() + static_cast<std::size_t>(i) * w, 1, w, row_lo.data() + static_cast<std::size_t>(i) * w2,
              row_hi.data() + static_cast<std::size_t>(i) * w2, 1);
    }
    for (int j = 0; j < w2; ++j) {
      analyze(row_lo.data() + j, w2, h, ll.data() + j, lh.data() + j, w2);
      analyze(row_hi.data() + j, w2, h, hl.data() + j, hh.data() + j, w2);
    }
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const std::size_t q = static_cast<std::size_t>(i / 2) * w2 + static_cast<std::size_t>(j / 2);
        out.at(0, i, j) += std::abs(lh[q]) + std::abs(hl[q]) + std::abs(hh[q]);
      }
    }
  }
  return out;
}

std::vector<double> oracle_scores(const Tensor& x_g, const Tensor& x_star, const BlockPartition& p) {
  require_pair(x_g, x_star, "oracle_scores");
  if (x_g.height() != p.height || x_g.width() != p.width) {
    throw GeometryError("oracle_scores: field does not match partition");
  }
  std::vector<double> out(static_cast<std::size_t>(p.count()));
  for (int b = 0; b < p.count(); ++b) {
    const auto o = p.origin(b);
    double s = 0.0;
    for (int c = 0; c < kVelocityChannels; ++c) {
      for (int i = 0; i < p.block; ++i) {
        for (int j = 0; j < p.block; ++j) {
          const double d = x_star.at(c, o.row + i, o.col + j) - x_g.at(c, o.row + i, o.col + j);
          s += d * d;
        }
      }
    }
    out[static_cast<std::size_t>(b)] = std::sqrt(s);
  }
  return out;
}

std::vector<double> risk_scores(const Tensor& x_t, const Tensor& x_g, const BlockPartition& p,
                                const RiskConfig& cfg) {
  return block_mean_map(risk_map(x_t, x_g, cfg), p);
}

std::vector<double> average_scores(std::vector<std::vector<double>> per_sample) {
  if (per_sample.empty()) throw NumericError("average of zero score vectors");
  const std::size_t n = per_sample.front().size();
  for (const auto& s : per_sample) {
    if (s.size() != n) throw GeometryError("score vectors differ in length");
  }
  std::sort(per_sample.begin(), per_sample.end());
  std::vector<double> out(n, 0.0);
  for (const auto& s : per_sample) {
    for (std::size_t b = 0; b < n; ++b) out[b] += s[b];
  }
  for (double& v : out) v /= static_cast<double>(per_sample.size());
  return out;
}

double jaccard(std::span<const int> a, std::span<const int> b) {
  std::vector<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::vector<int> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  if (uni.empty()) return 1.0;
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

std::vector<double> jaccard_stability(std::span<const std::vector<int>> sets) {
  std::vector<double> out;
  for (std::size_t t = 0; t + 1 < sets.size(); ++t) out.push_back(jaccard(sets[t], sets[t + 1]));
  return out;
}

const std::vector<std::string>& policy_names() {
  static const std::vector<std::string> names{"innovation_keg", "spectral_hf", "wavelet_hf",
                                              "random",         "oracle",      "static"};
  return names;
}

Policy parse_policy(const std::string& name) {
  const auto& names = policy_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<Policy>(i);
  }
  throw ConfigError("unknown routing policy '" + name + "'");
}

std::string to_string(Policy p) { return policy_names()[static_cast<std::size_t>(p)]; }

std::vector<double> policy_scores(Policy policy, const PolicyContext& ctx, const BlockPartition& p) {
  if (!ctx.x_g) throw DependencyError("policy needs the post-global field");
  switch (policy) {
    case Policy::InnovationKeg:
      if (!ctx.x_t) throw DependencyError("risk policy needs the current state");
      return risk_scores(*ctx.x_t, *ctx.x_g, p, ctx.risk);
    case Policy::SpectralHf:
      return block_mean_map(spectral_hf_map(*ctx.x_g), p);
    case Policy::WaveletHf:
      return block_mean_map(wavelet_hf_map(*ctx.x_g), p);
    case Policy::Random: {
      Rng rng(ctx.random_seed);
      std::vector<double> s(static_cast<std::size_t>(p.count()));
      for (double& v : s) v = rng.uniform();
      return s;
    }
    case Policy::Oracle:
      if (!ctx.x_star) throw DependencyError("oracle routing needs ground truth, which this run lacks");
      return oracle_scores(*ctx.x_g, *ctx.x_star, p);
    case Policy::Static:
      if (!ctx.static_scores) throw DependencyError("static routing needs a calibrated mask");
      if (ctx.static_scores->size() != static_cast<std::size_t>(p.count())) {
        throw GeometryError("static mask has the wrong block count");
      }
      return *ctx.static_scores;
  }
  throw ConfigError("unhandled policy");
}

}  // namespace haloroute
