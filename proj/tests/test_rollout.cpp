#include <algorithm>

#include "doctest.h"
#include "haloroute/rollout.hpp"
#include "test_util.hpp"

using namespace haloroute;

namespace {

SolverConfig solver32() {
  SolverConfig cfg;
  cfg.height = 32;
  cfg.width = 32;
  cfg.steps_per_frame = 2;
  cfg.seed = 11;
  return cfg;
}

const std::vector<Trajectory>& data() {
  static const auto d = generate_dataset(solver32(), 2, 6);
  return d;
}

void randomize(const nn::ParameterList& params, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto* p : params) {
    for (double& v : p->value) v = scale * rng.uniform(-1.0, 1.0);
  }
}

struct Stack {
  SurrogateHost host{{}, solver32()};
  GlobalCorrector global{[] {
                           GlobalCorrectorConfig g;
                           g.width = 6;
                           g.layers = 1;
                           g.modes = 4;
                           g.projection = 8;
                           g.clip_bound = 0.05;
                           return g;
                         }(),
                         32, 32};
  LocalRefiner local{[] {
    LocalRefinerConfig l;
    l.width = 6;
    return l;
  }()};

  explicit Stack(bool active) {
    if (active) {
      randomize(global.parameters(), 1, 0.3);
      randomize(local.parameters(), 2, 0.3);
    }
  }

  Components components() const {
    Components c;
    c.host = &host;
    c.global = &global;
    c.local = &local;
    c.partition = make_partition(32, 32, 8, 4);
    return c;
  }
};

bool pixel_in(const BlockPartition& p, const std::vector<int>& sel, int i, int j) {
  return std::find(sel.begin(), sel.end(), p.block_of(i, j)) != sel.end();
}

}  // namespace

TEST_CASE("rollout step budget extremes") {
  const Stack zero_heads(false);
  const Stack active(true);
  const auto& x = data()[0].frames[2];
  const auto win = hann_window(8);
  RiskConfig risk;

  for (const Stack* s : {&zero_heads, &active}) {
    const auto c = s->components();
    const auto out = rollout_step(x, c, 0, Policy::InnovationKeg, win, risk);
    CHECK(out.selected.empty());
    CHECK(bit_identical(out.next, out.x_g));
    CHECK(bit_identical(out.x_g, s->global.apply(x, s->host.forecast(x))));
  }
  // Zero heads: even the dense budget leaves the global correction untouched.
  const auto c0 = zero_heads.components();
  const auto dense = rollout_step(x, c0, 16, Policy::InnovationKeg, win, risk);
  CHECK(dense.selected.size() == 16);
  CHECK(bit_identical(dense.next, dense.x_g));
}

TEST_CASE("unselected blocks and scalar channels are untouched") {
  const Stack s(true);
  const auto c = s.components();
  const auto& x = data()[1].frames[3];
  const auto out = rollout_step(x, c, 5, Policy::InnovationKeg, hann_window(8), {});
  REQUIRE(out.selected.size() == 5);
  CHECK(std::is_sorted(out.selected.begin(), out.selected.end()));
  int changed = 0;
  for (int ch = 0; ch < 4; ++ch) {
    for (int i = 0; i < 32; ++i) {
      for (int j = 0; j < 32; ++j) {
        const double a = out.next.at(0, ch, i, j), b = out.x_g.at(0, ch, i, j);
        if (ch >= 2 || !pixel_in(c.partition, out.selected, i, j)) {
          CHECK(a == b);
        } else if (a != b) {
          ++changed;
        }
      }
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("hann off only changes selected pixels") {
  const Stack s(true);
  const auto c = s.components();
  const auto& x = data()[0].frames[1];
  const auto on = rollout_step(x, c, 6, Policy::InnovationKeg, hann_window(8), {});
  const auto off = rollout_step(x, c, 6, Policy::InnovationKeg, flat_window(8), {});
  CHECK(on.selected == off.selected);
  for (int ch = 0; ch < 4; ++ch) {
    for (int i = 0; i < 32; ++i) {
      for (int j = 0; j < 32; ++j) {
        if (ch >= 2 || !pixel_in(c.partition, on.selected, i, j)) {
          CHECK(on.next.at(0, ch, i, j) == off.next.at(0, ch, i, j));
        }
      }
    }
  }
  CHECK_FALSE(bit_identical(on.next, off.next));
}

TEST_CASE("relative L2 and perfect host") {
  const auto& f = data()[0].frames[2];
  Tensor twice = f;
  for (double& v : twice.storage()) v *= 2.0;
  CHECK(uv_relative_l2(f, twice) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(uv_relative_l2(f, f) == 0.0);
  CHECK_THROWS_AS(uv_relative_l2(f, Tensor(4, 32, 32)), NumericError);

  SurrogateHostConfig exact;
  exact.mode_cutoff = 1.0;
  exact.bias_scale = 0.0;
  exact.noise_scale = 0.0;
  const SurrogateHost host(exact, solver32());
  Components c;
  c.host = &host;
  c.partition = make_partition(32, 32, 8, 4);
  RolloutConfig cfg;
  cfg.horizon = 4;
  const auto r = run_rollout(data()[0], 1, cfg, c, RolloutMode::Raw);
  CHECK(r.step_losses.size() == 4);
  CHECK(r.loss < 1e-10);
}

TEST_CASE("rollout modes and validation") {
  const Stack s(true);
  auto c = s.components();
  RolloutConfig cfg;
  cfg.horizon = 3;
  cfg.budget = 0.25;
  const auto& traj = data()[0];
  const auto raw = run_rollout(traj, 1, cfg, c, RolloutMode::Raw);
  const auto glob = run_rollout(traj, 1, cfg, c, RolloutMode::Global);
  const auto hyb = run_rollout(traj, 1, cfg, c, RolloutMode::Hybrid);
  CHECK(raw.selected.empty());
  CHECK(glob.selected.empty());
  REQUIRE(hyb.selected.size() == 3);
  for (const auto& sel : hyb.selected) CHECK(sel.size() == 4);
  CHECK(raw.loss != glob.loss);

  const auto again = run_rollout(traj, 1, cfg, c, RolloutMode::Hybrid);
  CHECK(again.step_losses == hyb.step_losses);
  CHECK(bit_identical(again.final_state, hyb.final_state));

  auto bad = cfg;
  bad.horizon = 5;
  CHECK_THROWS_AS(run_rollout(traj, 1, bad, c, RolloutMode::Raw), ConfigError);
  bad = cfg;
  bad.budget = 1.5;
  CHECK_THROWS_AS(run_rollout(traj, 1, bad, c, RolloutMode::Raw), ConfigError);

  auto no_local = c;
  no_local.local = nullptr;
  CHECK_NOTHROW(run_rollout(traj, 1, cfg, no_local, RolloutMode::Global));
  CHECK_THROWS_AS(run_rollout(traj, 1, cfg, no_local, RolloutMode::Hybrid), DependencyError);

  auto static_cfg = cfg;
  static_cfg.policy = Policy::Static;
  CHECK_THROWS_AS(run_rollout(traj, 1, static_cfg, c, RolloutMode::Hybrid), DependencyError);
  const std::vector<int> pool{1, 2};
  const auto mask = static_mask(data(), c, pool, {});
  CHECK(mask.size() == 16);
  c.static_scores = &mask;
  const auto st = run_rollout(traj, 1, static_cfg, c, RolloutMode::Hybrid);
  for (const auto& sel : st.selected) CHECK(sel == st.selected.front());

  LocalRefinerConfig other;
  other.width = 6;
  other.block = 16;
  const LocalRefiner wrong(other);
  auto mismatched = s.components();
  mismatched.local = &wrong;
  CHECK_THROWS_AS(run_rollout(traj, 1, cfg, mismatched, RolloutMode::Hybrid), GeometryError);
}

TEST_CASE("oracle policy reads the truth") {
  const Stack s(true);
  const auto c = s.components();
  const auto& traj = data()[1];
  const auto& x = traj.frames[2];
  const auto& truth = traj.frames[3];
  const auto out = rollout_step(x, c, 3, Policy::Oracle, hann_window(8), {}, &truth);
  CHECK(out.selected == select_topk(oracle_scores(out.x_g, truth, c.partition), 3));
  CHECK_THROWS_AS(rollout_step(x, c, 3, Policy::Oracle, hann_window(8), {}), DependencyError);
}

TEST_CASE("evaluation, sweep endpoints and determinism") {
  const Stack s(true);
  const auto c = s.components();
  RolloutConfig cfg;
  cfg.horizon = 2;
  cfg.budget = 0.5;
  cfg.seed = 3;
  const std::vector<int> pool{1, 3};
  EvalOptions opt;
  opt.bootstrap_replicates = 200;

  const auto ev = evaluate(data(), pool, cfg, c, opt);
  REQUIRE(ev.runs.size() == 4);
  CHECK(ev.summary.runs == 4);
  CHECK(ev.summary.raw_ratio == 1.0);
  CHECK(ev.summary.sign_floor == 0.125);
  for (const auto& r : ev.runs) CHECK(r.audit.identity_residual() < 1e-12);
  CHECK(ev.summary.global_ci.lo <= ev.summary.global_ratio);
  CHECK(ev.summary.global_ratio <= ev.summary.global_ci.hi);

  opt.workers = 3;
  const auto ev3 = evaluate(data(), pool, cfg, c, opt);
  CHECK(evaluation_to_json(ev, 16).dump() == evaluation_to_json(ev3, 16).dump());

  const std::vector<double> fractions{0.0, 0.5, 1.0};
  const auto sw = budget_sweep(data(), pool, fractions, cfg, c, opt);
  REQUIRE(sw.points.size() == 3);
  CHECK(sw.points[0].k == 0);
  CHECK(sw.points[2].k == 16);
  for (std::size_t i = 0; i < ev.runs.size(); ++i) {
    CHECK(sw.raw_losses[i] == ev.runs[i].raw.loss);
    CHECK(sw.points[0].losses[i] == ev.runs[i].global.loss);
    CHECK(sw.points[1].losses[i] == ev.runs[i].hybrid.loss);
  }
  auto dense = cfg;
  dense.budget = 1.0;
  const auto d = run_rollout(data()[1], 3, dense, c, RolloutMode::Hybrid);
  CHECK(sw.points[2].losses[3] == d.loss);
  CHECK(sweep_to_json(sw).dump() == sweep_to_json(budget_sweep(data(), pool, fractions, cfg, c, opt)).dump());
}

TEST_CASE("random policy is seeded per run") {
  const Stack s(true);
  const auto c = s.components();
  RolloutConfig cfg;
  cfg.horizon = 3;
  cfg.budget = 0.25;
  cfg.policy = Policy::Random;
  const auto a = run_rollout(data()[0], 1, cfg, c, RolloutMode::Hybrid);
  const auto b = run_rollout(data()[0], 1, cfg, c, RolloutMode::Hybrid);
  CHECK(a.selected == b.selected);
  cfg.seed = 99;
  const auto other = run_rollout(data()[0], 1, cfg, c, RolloutMode::Hybrid);
  CHECK(other.selected != a.selected);
}

TEST_CASE("block mask and config json") {
  CHECK(block_mask(std::vector<int>{}, 16) == "0000");
  CHECK(block_mask(std::vector<int>{0}, 16) == "0001");
  CHECK(block_mask(std::vector<int>{0, 4, 15}, 16) == "8011");
  CHECK(block_mask(std::vector<int>{5}, 6) == "20");
  CHECK_THROWS_AS(block_mask(std::vector<int>{16}, 16), GeometryError);

  RolloutConfig cfg;
  cfg.horizon = 7;
  cfg.budget = 0.125;
  cfg.policy = Policy::WaveletHf;
  cfg.hann = false;
  cfg.risk.lambda_ke = 0.2;
  cfg.seed = 42;
  const auto back = RolloutConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK_THROWS_AS(RolloutConfig::from_json({{"policy", "nope"}}), ConfigError);
  CHECK_THROWS_AS(RolloutConfig::from_json({{"horizon", "x"}}), ConfigError);
  CHECK_THROWS_AS(RolloutConfig::from_json({{"budget", -0.1}}), ConfigError);
}
