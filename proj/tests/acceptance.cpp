// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
// usage: acceptance <desk config> <work dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include "haloroute/diagnostics.hpp"
#include "haloroute/experiment.hpp"
#include "haloroute/fields.hpp"
#include "haloroute/nn.hpp"
#include "haloroute/routing.hpp"
#include "haloroute/stats.hpp"
#include "test_util.hpp"

using namespace haloroute;
using haloroute::testing::dot;
using haloroute::testing::random_tensor;
using haloroute::testing::rel_err;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << id << ' ' << what << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

// ---- 1 ----------------------------------------------------------------------

void audit_identity() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  auto draw = [&] { return std::exp(rng.uniform(-5.0, 0.0)); };
  double worst = 0.0;
  for (int i = 0; i < 1000000; ++i) {
    const auto r = audit(draw(), draw(), draw());
    worst = std::max(worst, r.identity_residual());
  }
  double worst_uniform = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const auto r = audit(rng.uniform(1e-3, 1.0), rng.uniform(1e-3, 1.0), rng.uniform(0.0, 1.0));
    worst_uniform = std::max(worst_uniform, r.identity_residual());
  }
  const double secs = seconds_since(t0);
  report(1, worst < 1e-12 && secs < 5.0, "audit identity",
         "max residual " + fmt(worst) + " (uniform draws " + fmt(worst_uniform) + ") in " + fmt(secs) + " s");
}

// ---- 2 ----------------------------------------------------------------------

void pass_through() {
  const auto t0 = std::chrono::steady_clock::now();
  SolverConfig sc;
  sc.height = 64;
  sc.width = 64;
  sc.steps_per_frame = 1;
  sc.seed = 7;
  const auto traj = generate_dataset(sc, 2, 4);
  const SurrogateHost host({}, sc);

  GlobalCorrectorConfig gc;
  gc.width = 4;
  gc.layers = 1;
  gc.modes = 4;
  gc.projection = 8;
  gc.clip_bound = 0.05;
  GlobalCorrector global(gc, 64, 64);
  LocalRefinerConfig lc;
  lc.width = 4;
  LocalRefiner local(lc);
  Rng rng(202);
  for (auto* p : global.parameters()) {
    for (double& v : p->value) v = 0.3 * rng.uniform(-1.0, 1.0);
  }
  for (auto* p : local.parameters()) {
    for (double& v : p->value) v = 0.3 * rng.uniform(-1.0, 1.0);
  }

  Components c;
  c.host = &host;
  c.global = &global;
  c.local = &local;
  c.partition = make_partition(64, 64, 8, 4);
  const auto& part = c.partition;
  std::vector<double> static_scores(static_cast<std::size_t>(part.count()));
  c.static_scores = &static_scores;
  const auto win = hann_window(8);
  const std::vector<Policy> policies{Policy::InnovationKeg, Policy::SpectralHf, Policy::WaveletHf,
                                     Policy::Random,        Policy::Oracle,     Policy::Static};

  int bad = 0, selected_changed = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto& frames = traj[rng.below(traj.size())].frames;
    Tensor x = frames[rng.below(frames.size())];
    for (double& v : x.storage()) v += 0.05 * rng.uniform(-1.0, 1.0);
    const Policy pol = policies[static_cast<std::size_t>(trial) % policies.size()];
    const int k = budget_blocks(rng.uniform(), part.count());
    for (double& s : static_scores) s = rng.uniform();
    const Tensor truth = random_tensor(rng, 4, 64, 64);
    RiskConfig risk;
    const auto out = rollout_step(x, c, k, pol, win, risk, &truth, rng.next());

    std::vector<char> sel(static_cast<std::size_t>(part.count()), 0);
    for (int b : out.selected) sel[static_cast<std::size_t>(b)] = 1;
    bool same = true, touched = false;
    for (int i = 0; i < 64; ++i) {
      for (int j = 0; j < 64; ++j) {
        const bool in = sel[static_cast<std::size_t>(part.block_of(i, j))] != 0;
        for (int ch = 0; ch < 4; ++ch) {
          const bool eq = out.next.at(ch, i, j) == out.x_g.at(ch, i, j);
          if ((ch >= 2 || !in) && !eq) same = false;
          if (ch < 2 && in && !eq) touched = true;
        }
      }
    }
    if (!same || static_cast<int>(out.selected.size()) != k) ++bad;
    if (touched) ++selected_changed;
  }
  const double secs = seconds_since(t0);
  report(2, bad == 0 && secs < 30.0, "pass-through",
         std::to_string(bad) + " of 1000 cases violated (" + std::to_string(selected_changed) +
             " changed selected pixels) in " + fmt(secs) + " s");
}

// ---- 3 ----------------------------------------------------------------------

// Worst relative error of input and parameter gradients of <w, layer(x)>
// against central differences along random directions.
double layer_grad_error(nn::Layer& layer, const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  nn::LayerCache cache;
  const Tensor y = layer.forward(x, &cache);
  const Tensor w = random_tensor(rng, y.batch(), y.channels(), y.height(), y.width());
  nn::Gradients grads(static_cast<const nn::Layer&>(layer).parameters());
  const Tensor dx = layer.backward(w, cache, grads.slice(0, grads.count()));
  const double h = 1e-5;
  auto loss = [&](const Tensor& in) { return dot(w, layer.forward(in, nullptr)); };
  const Tensor dir = random_tensor(rng, x.batch(), x.channels(), x.height(), x.width());
  double worst = rel_err(dot(dx, dir), haloroute::testing::directional_fd(loss, x, dir, h));
  auto params = layer.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double> d(params[p]->size());
    for (double& v : d) v = rng.uniform(-1.0, 1.0);
    double analytic = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) analytic += grads[p][i] * d[i];
    const auto saved = params[p]->value;
    for (std::size_t i = 0; i < d.size(); ++i) params[p]->value[i] = saved[i] + h * d[i];
    const double lp = loss(x);
    for (std::size_t i = 0; i < d.size(); ++i) params[p]->value[i] = saved[i] - h * d[i];
    const double lm = loss(x);
    params[p]->value = saved;
    worst = std::max(worst, rel_err(analytic, (lp - lm) / (2.0 * h)));
  }
  return worst;
}

void gradients() {
  double worst_layer = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    nn::Conv2d conv("c", 3, 4, 3, rng);
    nn::SpectralConv2d spec("s", 3, 2, 3, rng);
    nn::Gelu gelu;
    nn::ChannelNorm norm("n", 3);
    for (double& v : norm.parameters()[0]->value) v = rng.uniform(0.5, 1.5);
    for (double& v : norm.parameters()[1]->value) v = rng.uniform(-0.5, 0.5);
    nn::FourierBlock block("f", 3, 3, rng);
    for (nn::Layer* l : std::initializer_list<nn::Layer*>{&conv, &spec, &gelu, &norm, &block}) {
      worst_layer = std::max(worst_layer, layer_grad_error(*l, random_tensor(rng, 2, 3, 8, 8, 2.0), seed + 10));
    }
  }

  SolverConfig sc;
  sc.height = 32;
  sc.width = 32;
  sc.dt = 0.025;
  sc.steps_per_frame = 2;
  sc.seed = 5;
  const auto traj = generate_dataset(sc, 1, 4)[0];
  const SurrogateHost host({}, sc);
  const auto part = make_partition(32, 32, 8, 4);
  const auto win = hann_window(8);
  const std::span<const Tensor> truths(traj.frames.data() + 2, 2);
  double worst_e2e = 0.0;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    GlobalCorrectorConfig gc;
    gc.width = 6;
    gc.layers = 1;
    gc.modes = 4;
    gc.projection = 8;
    gc.clip_bound = 100.0;  // clamp inactive
    GlobalCorrector g(gc, 32, 32);
    LocalRefinerConfig lc;
    lc.width = 6;
    LocalRefiner local(lc);
    for (const auto& params : {g.parameters(), local.parameters()}) {
      for (auto* p : params) {
        for (double& v : p->value) v = 0.2 * rng.uniform(-1.0, 1.0);
      }
    }
    auto loss = [&] { return ar_unroll_loss(host, g, &local, &part, &win, traj.frames[1], truths, 0.1); };
    nn::Gradients gg(g.parameters()), gl(local.parameters());
    ar_unroll_loss(host, g, &local, &part, &win, traj.frames[1], truths, 0.1, {&gg, &gl});
    for (auto [params, grads] : {std::pair{g.parameters(), &gg}, std::pair{local.parameters(), &gl}}) {
      std::vector<std::vector<double>> dir;
      std::vector<std::vector<double>> base;
      double analytic = 0.0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        dir.emplace_back(params[i]->size());
        for (std::size_t k = 0; k < dir[i].size(); ++k) {
          dir[i][k] = rng.uniform(-1.0, 1.0);
          analytic += (*grads)[i][k] * dir[i][k];
        }
        base.push_back(params[i]->value);
      }
      auto shifted = [&](double s) {
        for (std::size_t i = 0; i < params.size(); ++i) {
          for (std::size_t k = 0; k < base[i].size(); ++k) params[i]->value[k] = base[i][k] + s * dir[i][k];
        }
        return loss();
      };
      const double h = 1e-5;
      const double fd = (shifted(h) - shifted(-h)) / (2.0 * h);
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = base[i];
      worst_e2e = std::max(worst_e2e, rel_err(analytic, fd));
    }
  }
  report(3, worst_layer < 1e-4 && worst_e2e < 1e-3, "gradients",
         "worst layer rel err " + fmt(worst_layer) + ", two-step hybrid unroll " + fmt(worst_e2e));
}

// ---- 4 ----------------------------------------------------------------------

void topk() {
  Rng rng(404);
  int mismatches = 0, nest_failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(80));
    std::vector<double> s(static_cast<std::size_t>(n));
    const bool ties = trial % 2 == 0;
    for (double& v : s) v = ties ? static_cast<double>(rng.below(5)) : rng.uniform();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return s[a] != s[b] ? s[a] > s[b] : a < b;
    });
    std::vector<int> prev;
    for (int k = 0; k <= n; ++k) {
      std::vector<int> expect(order.begin(), order.begin() + k);
      std::sort(expect.begin(), expect.end());
      const auto got = select_topk(s, k);
      if (got != expect) ++mismatches;
      if (!std::includes(got.begin(), got.end(), prev.begin(), prev.end())) ++nest_failures;
      prev = got;
    }
  }
  report(4, mismatches == 0 && nest_failures == 0, "top-k selection",
         std::to_string(mismatches) + " mismatches against full sort, " + std::to_string(nest_failures) +
             " nesting violations");
}

// ---- 5 ----------------------------------------------------------------------

double gini_pairs(const std::vector<double>& x) {
  double diff = 0.0, sum = 0.0;
  for (double a : x) {
    sum += a;
    for (double b : x) diff += std::abs(a - b);
  }
  return sum == 0.0 ? 0.0 : diff / (2.0 * static_cast<double>(x.size()) * sum);
}

void statistics() {
  const bool floor_ok = sign_test_floor(8) == 0.0078125;
  Rng rng(505);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x(1 + rng.below(100));
    for (double& v : x) v = t % 3 == 0 ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 10.0);
    if (std::all_of(x.begin(), x.end(), [](double v) { return v == 0.0; })) x[0] = 1.0;
    worst = std::max(worst, std::abs(gini(x) - gini_pairs(x)));
  }
  bool point_ok = true;
  for (int n : {2, 7, 64, 1000}) {
    std::vector<double> p(static_cast<std::size_t>(n), 0.0);
    p[static_cast<std::size_t>(n / 2)] = 3.0;
    point_ok = point_ok && std::abs(gini(p) - (n - 1.0) / n) < 1e-15;
  }
  std::vector<double> v(40);
  for (double& e : v) e = rng.uniform();
  const auto a = bootstrap_median_ci(v, 2000, 0.05, 99, 1);
  const auto b = bootstrap_median_ci(v, 2000, 0.05, 99, 1);
  const auto c = bootstrap_median_ci(v, 2000, 0.05, 99, 4);
  const bool boot_ok = a.lo == b.lo && a.hi == b.hi && a.lo == c.lo && a.hi == c.hi && a.lo <= a.hi;
  report(5, floor_ok && worst < 1e-12 && point_ok && boot_ok, "statistics",
         "sign floor(8) " + fmt(sign_test_floor(8)) + ", gini worst " + fmt(worst) + ", point mass " +
             (point_ok ? "ok" : "off") + ", bootstrap " + (boot_ok ? "deterministic" : "not deterministic"));
}

// ---- 6 ----------------------------------------------------------------------

Tensor velocity(int n, const std::function<double(double, double)>& u, const std::function<double(double, double)>& v) {
  Tensor f(4, n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double x = grid_coordinate(j, n), y = grid_coordinate(i, n);
      f.at(0, i, j) = u(x, y);
      f.at(1, i, j) = v(x, y);
    }
  }
  return f;
}

void diagnostics() {
  const auto tg = velocity(64, [](double x, double y) { return std::cos(x) * std::sin(y); },
                           [](double x, double y) { return -std::sin(x) * std::cos(y); });
  const double div = mean_abs_divergence(tg);
  const auto e = ke_spectrum(velocity(32, [](double x, double y) { return std::cos(3 * x + 4 * y); },
                                      [](double, double) { return 0.0; }));
  double off = 0.0;
  for (std::size_t k = 0; k < e.size(); ++k) {
    if (k != 5) off += std::abs(e[k]);
  }
  const bool shell_ok = e.size() > 5 && std::abs(e[5] - 0.25) < 1e-12 && off < 1e-20;
  Rng rng(606);
  double parseval = 0.0;
  for (int t = 0; t < 10; ++t) {
    const Tensor f = random_tensor(rng, 4, 32 + 8 * (t % 3), 32);
    const auto s = ke_spectrum(f);
    parseval = std::max(parseval, std::abs(std::accumulate(s.begin(), s.end(), 0.0) - kinetic_energy(f)));
  }
  report(6, div < 1e-12 && shell_ok && parseval < 1e-10, "diagnostics",
         "vortex divergence " + fmt(div) + ", mode (3,4) in shell 5 " + (shell_ok ? "yes" : "no") +
             ", spectrum sum residual " + fmt(parseval));
}

// ---- 7, 8, 9 ------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void pipeline(const fs::path& config, const fs::path& work) {
  auto cfg = ExperimentConfig::load(config);
  cfg.out = work;
  cfg.derive_seeds();
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  cmd_gen_data(cfg);
  for (Stage st : {Stage::Global, Stage::LocalPatch, Stage::LocalAr}) cmd_train(cfg, st, {-1, true});
  std::cout << "  training took " << fmt(seconds_since(t0)) << " s" << std::endl;

  const auto ev = cmd_evaluate(cfg);
  const auto& s = ev["results"]["summary"];
  const double g = s["median_ratio"]["global"], h = s["median_ratio"]["hybrid"], j = s["median_J_loc"];
  std::cout << "  evaluate at budget " << fmt(cfg.rollout.budget) << ": global " << fmt(g) << ", hybrid "
            << fmt(h) << ", median J_loc " << fmt(j) << std::endl;

  auto dense = cfg;
  dense.rollout.budget = 1.0;
  double j_dense = j;
  if (cfg.rollout.budget != 1.0) {
    dense.out = work / "dense";
    fs::create_directories(dense.out);
    for (const char* d : {"data", "checkpoints"}) {
      fs::remove_all(dense.out / d);
      fs::copy(work / d, dense.out / d, fs::copy_options::recursive);
    }
    j_dense = cmd_evaluate(dense)["results"]["summary"]["median_J_loc"];
  }

  const auto sw = cmd_sweep(cfg, "budget")["results"]["points"];
  bool monotone = true;
  std::string curve;
  for (std::size_t a = 0; a < sw.size(); ++a) {
    curve += (a ? " " : "") + fmt(sw[a]["budget"].get<double>()) + ":" + fmt(sw[a]["median_ratio"].get<double>());
    for (std::size_t b = a + 1; b < sw.size(); ++b) {
      const double ra = sw[a]["median_ratio"], rb = sw[b]["median_ratio"];
      const double hi_a = sw[a]["ci"][1], lo_b = sw[b]["ci"][0];
      if (rb > ra && lo_b > hi_a) monotone = false;
    }
  }

  auto quarter = cfg;
  quarter.rollout.budget = 0.25;
  const double oracle = cmd_ablate(quarter, "policy=oracle")["results"]["median_variant_loss"];
  const double random = cmd_ablate(quarter, "policy=random")["results"]["median_variant_loss"];

  const auto ok_a = g < 0.5, ok_b = j_dense > 0.1, ok_d = oracle <= random;
  report(7, ok_a && ok_b && monotone && ok_d, "desk pipeline",
         std::string("(a) global ratio ") + fmt(g) + (ok_a ? " ok" : " too high") + "; (b) median J_loc at full budget " +
             fmt(j_dense) + (ok_b ? " ok" : " not above 0.1") + "; (c) budget curve [" + curve + "] " +
             (monotone ? "ok" : "increases beyond CI") + "; (d) oracle " + fmt(oracle) + " vs random " +
             fmt(random) + (ok_d ? " ok" : " oracle worse"));

  const auto hann = cmd_ablate(cfg, "hann_off")["results"];
  const double off = hann["median_variant_loss"], on = hann["median_baseline_loss"];
  report(8, off > on, "window ablation",
         "median loss with the window off " + fmt(off) + " vs on " + fmt(on) + ", paired ratio " +
             fmt(hann["median_ratio_to_baseline"].get<double>()));

  const auto path = cfg.results_dir() / "evaluate.json";
  const std::string first = slurp(path);
  cmd_evaluate(cfg);
  const std::string second = slurp(path);
  report(9, !first.empty() && first == second, "rerun determinism",
         "evaluate.json " + std::string(first == second ? "byte-identical" : "differs") + " across reruns (" +
             std::to_string(first.size()) + " bytes)");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: acceptance <desk config> <work dir>\n";
    return 2;
  }
  audit_identity();
  pass_through();
  gradients();
  topk();
  statistics();
  diagnostics();
  try {
    pipeline(argv[1], argv[2]);
  } catch (const std::exception& e) {
    for (int id : {7, 8, 9}) report(id, false, "desk pipeline", std::string("aborted: ") + e.what());
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
