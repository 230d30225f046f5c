#include <filesystem>

#include "doctest.h"
#include "haloroute/correctors.hpp"
#include "test_util.hpp"

using namespace haloroute;
using haloroute::testing::dot;
using haloroute::testing::random_tensor;
using haloroute::testing::rel_err;

namespace {

SolverConfig tiny_solver() {
  SolverConfig cfg;
  cfg.height = 32;
  cfg.width = 32;
  cfg.dt = 0.025;
  cfg.steps_per_frame = 2;
  cfg.seed = 5;
  return cfg;
}

GlobalCorrectorConfig tiny_global() {
  GlobalCorrectorConfig g;
  g.width = 6;
  g.layers = 1;
  g.modes = 4;
  g.projection = 8;
  return g;
}

LocalRefinerConfig tiny_local() {
  LocalRefinerConfig l;
  l.width = 6;
  l.depth = 3;
  return l;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.ar_depth = 2;
  t.t0_pool_global = {1, 2};
  t.t0_pool_patch = {1, 2};
  t.t0_pool_ar = {1, 2};
  t.epochs_global = 3;
  t.patience = 5;
  t.patch_steps = 6;
  t.patch_batch = 4;
  t.patch_eval_every = 2;
  t.epochs_ar = 3;
  t.curriculum_epochs = {1, 2};
  t.seed = 9;
  return t;
}

const std::vector<Trajectory>& tiny_data() {
  static const auto data = generate_dataset(tiny_solver(), 3, 5);
  return data;
}

const SurrogateHost& tiny_host() {
  static const SurrogateHost host({}, tiny_solver());
  return host;
}

void randomize(const nn::ParameterList& params, Rng& rng, double scale) {
  for (auto* p : params) {
    for (double& v : p->value) v = scale * rng.uniform(-1.0, 1.0);
  }
}

// Directional derivative of the loss along a random parameter direction.
double param_fd(const nn::ParameterList& params, const std::vector<std::vector<double>>& dir,
                const std::function<double()>& loss, double step) {
  const auto base = nn::snapshot(nn::ConstParameterList(params.begin(), params.end()));
  auto shifted = [&](double s) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t k = 0; k < base[i].size(); ++k) params[i]->value[k] = base[i][k] + s * dir[i][k];
    }
    return loss();
  };
  const double d = (shifted(step) - shifted(-step)) / (2.0 * step);
  nn::restore(params, base);
  return d;
}

std::vector<std::vector<double>> random_direction(const nn::ParameterList& params, Rng& rng) {
  std::vector<std::vector<double>> dir;
  for (auto* p : params) {
    dir.emplace_back(p->size());
    for (double& v : dir.back()) v = rng.uniform(-1.0, 1.0);
  }
  return dir;
}

double grad_dot(const nn::Gradients& g, const std::vector<std::vector<double>>& dir) {
  double s = 0.0;
  for (std::size_t i = 0; i < dir.size(); ++i) {
    for (std::size_t k = 0; k < dir[i].size(); ++k) s += g[i][k] * dir[i][k];
  }
  return s;
}

}  // namespace

TEST_CASE("zero-initialized global head leaves the forecast untouched") {
  Rng rng(1);
  GlobalCorrector g(tiny_global(), 32, 32);
  const Tensor x_t = random_tensor(rng, 4, 32, 32);
  const Tensor x_hat = random_tensor(rng, 4, 32, 32);
  CHECK(bit_identical(g.apply(x_t, x_hat), x_hat));
}

TEST_CASE("global residual is clamped to the clip bound") {
  Rng rng(2);
  auto cfg = tiny_global();
  cfg.clip_bound = 0.8293;
  GlobalCorrector g(cfg, 32, 32);
  // Head: zero weights, bias 2.0 on u and -2.0 on v, so the raw residual is +-2.
  auto& head = dynamic_cast<nn::Conv2d&>(g.net().layer(g.net().size() - 1));
  head.bias().value = {2.0, -2.0};
  const Tensor x_t = random_tensor(rng, 4, 32, 32);
  const Tensor x_hat = random_tensor(rng, 4, 32, 32);
  const Tensor r = g.residual(x_t, x_hat);
  for (int i = 0; i < 32; ++i) {
    for (int j = 0; j < 32; ++j) {
      CHECK(r.at(0, i, j) == 0.8293);
      CHECK(r.at(1, i, j) == -0.8293);
    }
  }
  const Tensor x_g = g.apply(x_t, x_hat);
  CHECK(x_g.at(0, 3, 4) == x_hat.at(0, 3, 4) + 0.8293);
  // Scalar channels pass through.
  for (int c = 2; c < 4; ++c) {
    for (std::size_t p = 0; p < x_g.plane_size(); ++p) CHECK(x_g.plane(c)[p] == x_hat.plane(c)[p]);
  }
  CHECK_THROWS_AS(g.set_clip_bound(0.0), NumericError);
}

TEST_CASE("global corrector rejects inputs on another grid") {
  GlobalCorrector g(tiny_global(), 32, 32);
  const Tensor x(4, 16, 16);
  CHECK_THROWS_AS(g.apply(x, x), GeometryError);
  CHECK_THROWS_AS(GlobalCorrector(tiny_global(), 6, 6), ConfigError);
}

TEST_CASE("nearest-rank percentile and clip calibration") {
  std::vector<double> v;
  for (int i = 1; i <= 10; ++i) v.push_back(0.1 * i);
  CHECK(nearest_rank_percentile(v, 95.0) == v.back());
  CHECK(nearest_rank_percentile({0.3, 0.3, 0.3}, 95.0) == 0.3);
  CHECK(nearest_rank_percentile({5.0, 1.0, 3.0, 2.0, 4.0}, 40.0) == 2.0);
  CHECK_THROWS_AS(nearest_rank_percentile({}, 95.0), NumericError);

  const auto& data = tiny_data();
  CHECK_THROWS_AS(clip_calibration(data, tiny_host(), std::vector<int>{1}), ConfigError);
  CHECK_THROWS_AS(clip_calibration({}, tiny_host(), std::vector<int>{1}), NumericError);
  const std::vector<int> pool{0, 1, 2, 3};
  const double c = clip_calibration(data, tiny_host(), pool);
  // Oracle: recompute the maxima directly.
  std::vector<double> maxima;
  for (const auto& traj : data) {
    for (int t0 : pool) {
      const Tensor x_hat = tiny_host().forecast(traj.frames[static_cast<std::size_t>(t0)]);
      double m = 0.0;
      for (int ch = 0; ch < 2; ++ch) {
        for (int i = 0; i < 32; ++i) {
          for (int j = 0; j < 32; ++j) {
            m = std::max(m, std::abs(traj.frames[static_cast<std::size_t>(t0) + 1].at(ch, i, j) -
                                     x_hat.at(ch, i, j)));
          }
        }
      }
      maxima.push_back(m);
    }
  }
  std::sort(maxima.begin(), maxima.end());
  CHECK(c == maxima[11]);  // ceil(0.95 * 12) = 12th smallest
  CHECK(c > 0.0);
}

TEST_CASE("energy weights") {
  const std::vector<double> e{1.0, 4.0, 2.0, 0.0};
  const auto w = energy_weights(e, 1e-12);
  CHECK(w[0] == 1.0 / (4.0 + 1e-12));
  CHECK(w[1] == 4.0 / (4.0 + 1e-12));
  CHECK(w[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w[3] == 0.0);
  const auto zero = energy_weights(std::vector<double>{0.0, 0.0}, 1e-12);
  CHECK(zero[0] == 0.0);
  CHECK(parse_patch_weighting("energy") == PatchWeighting::Energy);
  CHECK_THROWS_AS(parse_patch_weighting("bogus"), ConfigError);
}

TEST_CASE("patch loss: uniform is the mean of per-block losses, zero residual costs nothing") {
  Rng rng(3);
  LocalRefiner local(tiny_local());
  randomize(local.parameters(), rng, 0.2);
  const int s = local.window_side();
  const Tensor windows = random_tensor(rng, 5, 8, s, s);
  const Tensor targets = random_tensor(rng, 5, 2, 8, 8);
  const std::vector<double> ones(5, 1.0);
  const double whole = patch_loss(local, windows, targets, ones, nullptr);
  double sum = 0.0;
  for (int n = 0; n < 5; ++n) {
    sum += patch_loss(local, windows.sample(n), targets.sample(n), std::vector<double>{1.0}, nullptr);
  }
  CHECK(whole == doctest::Approx(sum / 5.0).epsilon(1e-13));

  // Zero head predicts zero; a zero target then gives zero loss.
  LocalRefiner fresh(tiny_local());
  CHECK(patch_loss(fresh, windows, Tensor(5, 2, 8, 8), ones, nullptr) == 0.0);

  // Gradient check of the patch loss.
  nn::Gradients g(local.parameters());
  patch_loss(local, windows, targets, ones, &g);
  const auto dir = random_direction(local.parameters(), rng);
  const double fd = param_fd(local.parameters(), dir,
                             [&] { return patch_loss(local, windows, targets, ones, nullptr); }, 1e-5);
  CHECK(rel_err(grad_dot(g, dir), fd) < 1e-6);
}

TEST_CASE("local refiner geometry, determinism and budget independence") {
  Rng rng(4);
  LocalRefiner local(tiny_local());
  randomize(local.parameters(), rng, 0.3);
  const auto p = make_partition(32, 32, 8, 4);
  const Tensor x_t = random_tensor(rng, 4, 32, 32);
  const Tensor x_g = random_tensor(rng, 4, 32, 32);
  const auto all = all_blocks(p);
  const Tensor all_out = local.forward(extract_windows(x_t, x_g, p, all));
  CHECK(all_out.height() == 8);
  CHECK(all_out.width() == 8);
  CHECK(all_out.batch() == p.count());
  CHECK(bit_identical(all_out, local.forward(extract_windows(x_t, x_g, p, all))));

  const std::vector<int> subset{13, 2, 7};
  const Tensor sub_out = local.forward(extract_windows(x_t, x_g, p, subset));
  for (std::size_t n = 0; n < subset.size(); ++n) {
    CHECK(bit_identical(sub_out.sample(static_cast<int>(n)), all_out.sample(subset[n])));
  }

  CHECK_THROWS_AS(local.forward(Tensor(1, 8, 12, 12)), GeometryError);
  CHECK_THROWS_AS(local.forward(Tensor(1, 4, 16, 16)), GeometryError);

  // Zero head: hybrid equals the post-global field.
  LocalRefiner fresh(tiny_local());
  const Tensor zero = fresh.forward(extract_windows(x_t, x_g, p, all));
  CHECK(bit_identical(write_blocks(x_g, p, all, zero, hann_window(8)), x_g));
}

TEST_CASE("zero heads: AR loss equals the raw host rollout loss") {
  const auto& traj = tiny_data()[0];
  GlobalCorrector g(tiny_global(), 32, 32);
  LocalRefiner local(tiny_local());
  const auto p = make_partition(32, 32, 8, 4);
  const auto win = hann_window(8);
  const std::span<const Tensor> truths(traj.frames.data() + 2, 2);
  Tensor z = traj.frames[1];
  double raw = 0.0;
  for (const auto& t : truths) {
    z = tiny_host().forecast(z);
    raw += velocity_mse(z, t);
  }
  CHECK(ar_unroll_loss(tiny_host(), g, nullptr, nullptr, nullptr, traj.frames[1], truths, 0.0) == raw);
  CHECK(ar_unroll_loss(tiny_host(), g, &local, &p, &win, traj.frames[1], truths, 1e-4) == raw);
}

TEST_CASE("end-to-end gradient through a two-step hybrid unroll") {
  const auto& traj = tiny_data()[1];
  const auto p = make_partition(32, 32, 8, 4);
  const auto win = hann_window(8);
  const std::span<const Tensor> truths(traj.frames.data() + 2, 2);
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    auto gcfg = tiny_global();
    gcfg.clip_bound = 100.0;  // keep the clamp inactive so the loss is smooth
    GlobalCorrector g(gcfg, 32, 32);
    LocalRefiner local(tiny_local());
    randomize(g.parameters(), rng, 0.2);
    randomize(local.parameters(), rng, 0.2);
    auto loss = [&] {
      return ar_unroll_loss(tiny_host(), g, &local, &p, &win, traj.frames[1], truths, 0.1);
    };
    nn::Gradients gg(g.parameters()), gl(local.parameters());
    const double l0 = ar_unroll_loss(tiny_host(), g, &local, &p, &win, traj.frames[1], truths, 0.1,
                                     {&gg, &gl});
    CHECK(l0 == loss());
    const auto dg = random_direction(g.parameters(), rng);
    const auto dl = random_direction(local.parameters(), rng);
    const double fd_g = param_fd(g.parameters(), dg, loss, 1e-5);
    const double fd_l = param_fd(local.parameters(), dl, loss, 1e-5);
    CHECK(rel_err(grad_dot(gg, dg), fd_g) < 1e-3);
    CHECK(rel_err(grad_dot(gl, dl), fd_l) < 1e-3);
  }
}

TEST_CASE("training config validation and curriculum") {
  TrainConfig t;
  t.ar_depth = 5;
  t.curriculum_epochs = {30, 60};
  CHECK(curriculum_depth(t, 0) == 1);
  CHECK(curriculum_depth(t, 29) == 1);
  CHECK(curriculum_depth(t, 30) == 2);
  CHECK(curriculum_depth(t, 60) == 5);
  t.ar_depth = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.ar_depth = 5;
  t.patience = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  const auto rt = TrainConfig::from_json(tiny_train().to_json());
  CHECK(rt.to_json() == tiny_train().to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"ar_depth", "five"}}), ConfigError);

  const auto [tr, val] = validation_split(20, 0.1);
  CHECK(tr.size() == 18);
  CHECK(val == std::vector<int>{18, 19});
  CHECK_THROWS_AS(validation_split(1, 0.1), ConfigError);
}

TEST_CASE("training stages respect the freeze contract and short data is rejected") {
  const auto& data = tiny_data();
  const auto cfg = tiny_train();
  GlobalCorrector g(tiny_global(), 32, 32);
  std::vector<double> val_log;
  StageControl control;
  control.log = [&](const nlohmann::json& r) { val_log.push_back(r.at("val_loss")); };
  const auto res = train_global(g, data, tiny_host(), cfg, control);
  CHECK(res.best_validation <= res.initial_validation);
  CHECK(val_log.size() == 4);

  const std::string g_sum = nn::parameter_checksum(g.parameters());
  LocalRefiner local(tiny_local());
  train_local_patch(local, data, tiny_host(), g, cfg);
  CHECK(nn::parameter_checksum(g.parameters()) == g_sum);
  const std::string l_sum = nn::parameter_checksum(local.parameters());
  CHECK(l_sum != nn::parameter_checksum(LocalRefiner(tiny_local()).parameters()));
  const auto ar = train_local_ar(local, data, tiny_host(), g, cfg);
  CHECK(nn::parameter_checksum(g.parameters()) == g_sum);
  CHECK(ar.best_validation <= ar.initial_validation);

  auto long_cfg = cfg;
  long_cfg.t0_pool_global = {3};
  CHECK_THROWS_AS(train_global(g, data, tiny_host(), long_cfg), ConfigError);
}

TEST_CASE("interrupted training resumes to the same result") {
  const auto& data = tiny_data();
  const auto cfg = tiny_train();
  const auto dir = std::filesystem::temp_directory_path() / "haloroute_resume_test";
  std::filesystem::remove_all(dir);

  auto run = [&](auto&& train_fn, const std::filesystem::path& state, int stop) {
    std::vector<std::string> log;
    StageControl c;
    c.log = [&](const nlohmann::json& r) { log.push_back(r.dump()); };
    c.state_dir = state;
    c.stop_after = stop;
    const auto res = train_fn(c);
    return std::make_pair(res, log);
  };

  GlobalCorrector g_full(tiny_global(), 32, 32);
  auto [full, full_log] = run([&](const StageControl& c) { return train_global(g_full, data, tiny_host(), cfg, c); }, {}, -1);
  GlobalCorrector g_part(tiny_global(), 32, 32);
  auto [first, log1] = run([&](const StageControl& c) { return train_global(g_part, data, tiny_host(), cfg, c); }, dir / "g", 1);
  CHECK_FALSE(first.completed);
  GlobalCorrector g_resumed(tiny_global(), 32, 32);
  auto [second, log2] = run([&](const StageControl& c) { return train_global(g_resumed, data, tiny_host(), cfg, c); }, dir / "g", -1);
  CHECK(second.completed);
  log1.insert(log1.end(), log2.begin(), log2.end());
  CHECK(log1 == full_log);
  CHECK(nn::parameter_checksum(g_resumed.parameters()) == nn::parameter_checksum(g_full.parameters()));

  LocalRefiner l_full(tiny_local());
  run([&](const StageControl& c) { return train_local_patch(l_full, data, tiny_host(), g_full, cfg, c); }, {}, -1);
  LocalRefiner l_part(tiny_local());
  run([&](const StageControl& c) { return train_local_patch(l_part, data, tiny_host(), g_full, cfg, c); }, dir / "p", 1);
  LocalRefiner l_resumed(tiny_local());
  run([&](const StageControl& c) { return train_local_patch(l_resumed, data, tiny_host(), g_full, cfg, c); }, dir / "p", -1);
  CHECK(nn::parameter_checksum(l_resumed.parameters()) == nn::parameter_checksum(l_full.parameters()));

  LocalRefiner a_full = l_full;
  run([&](const StageControl& c) { return train_local_ar(a_full, data, tiny_host(), g_full, cfg, c); }, {}, -1);
  LocalRefiner a_part = l_full;
  run([&](const StageControl& c) { return train_local_ar(a_part, data, tiny_host(), g_full, cfg, c); }, dir / "a", 2);
  LocalRefiner a_resumed = l_full;
  run([&](const StageControl& c) { return train_local_ar(a_resumed, data, tiny_host(), g_full, cfg, c); }, dir / "a", -1);
  CHECK(nn::parameter_checksum(a_resumed.parameters()) == nn::parameter_checksum(a_full.parameters()));
  std::filesystem::remove_all(dir);
}
