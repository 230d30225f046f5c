#include "haloroute/rollout.hpp"

#include <cmath>

#include "haloroute/parallel.hpp"
#include "haloroute/rng.hpp"

namespace haloroute {

std::string to_string(RolloutMode m) {
  switch (m) {
    case RolloutMode::Raw: return "raw";
    case RolloutMode::Global: return "global";
    case RolloutMode::Hybrid: return "hybrid";
  }
  return "?";
}

void RolloutConfig::validate() const {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  if (!(budget >= 0.0 && budget <= 1.0)) throw ConfigError("budget fraction must lie in [0, 1]");
  risk.validate();
}

nlohmann::json RolloutConfig::to_json() const {
  return {{"horizon", horizon}, {"budget", budget}, {"policy", to_string(policy)},
          {"hann", hann},       {"lambda_ke", risk.lambda_ke}, {"seed", seed},
          {"keep_fields", keep_fields}};
}

RolloutConfig RolloutConfig::from_json(const nlohmann::json& j) {
  RolloutConfig c;
  try {
    c.horizon = j.value("horizon", c.horizon);
    c.budget = j.value("budget", c.budget);
    if (j.contains("policy")) c.policy = parse_policy(j.at("policy").get<std::string>());
    c.hann = j.value("hann", c.hann);
    c.risk.lambda_ke = j.value("lambda_ke", c.risk.lambda_ke);
    c.seed = j.value("seed", c.seed);
    c.keep_fields = j.value("keep_fields", c.keep_fields);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("rollout config: ") + e.what());
  }
  c.validate();
  return c;
}

void Components::check(RolloutMode mode) const {
  if (!host) throw DependencyError("rollout needs a host");
  if (mode == RolloutMode::Raw) return;
  if (!global) throw DependencyError("global corrector checkpoint missing; train the global stage first");
  if (global->height() != partition.height || global->width() != partition.width) {
    throw GeometryError("global corrector grid does not match the partition");
  }
  if (mode == RolloutMode::Global) return;
  if (!local) throw DependencyError("local refiner checkpoint missing; train the local stages first");
  if (local->config().block != partition.block || local->config().halo != partition.halo) {
    throw GeometryError("refiner was trained for b=" + std::to_string(local->config().block) +
                        ", h=" + std::to_string(local->config().halo) + " but the partition has b=" +
                        std::to_string(partition.block) + ", h=" + std::to_string(partition.halo));
  }
}

StepOutput rollout_step(const Tensor& x_t, const Components& c, int k, Policy policy,
                        const HannWindow& win, const RiskConfig& risk, const Tensor* x_star,
                        std::uint64_t random_seed) {
  StepOutput out;
  const Tensor x_hat = c.host->forecast(x_t);
  out.x_g = c.global ? c.global->apply(x_t, x_hat) : x_hat;
  if (k == 0) {
    out.next = out.x_g;
    return out;
  }
  if (!c.local) throw DependencyError("routing budget > 0 needs a local refiner");
  PolicyContext ctx;
  ctx.x_t = &x_t;
  ctx.x_g = &out.x_g;
  ctx.x_star = x_star;
  ctx.static_scores = c.static_scores;
  ctx.risk = risk;
  ctx.random_seed = random_seed;
  out.selected = select_topk(policy_scores(policy, ctx, c.partition), k);
  const Tensor deltas = c.local->forward(extract_windows(x_t, out.x_g, c.partition, out.selected));
  out.next = write_blocks(out.x_g, c.partition, out.selected, deltas, win);
  return out;
}

double uv_relative_l2(const Tensor& pred, const Tensor& truth) {
  require_same_shape(pred, truth, "uv_relative_l2");
  double num = 0.0, den = 0.0;
  for (int c = 0; c < kVelocityChannels; ++c) {
    const auto a = pred.plane(c), b = truth.plane(c);
    for (std::size_t p = 0; p < a.size(); ++p) {
      num += (a[p] - b[p]) * (a[p] - b[p]);
      den += b[p] * b[p];
    }
  }
  if (!(den > 0.0)) throw NumericError("relative error against a zero velocity field");
  return std::sqrt(num / den);
}

RolloutResult run_rollout(const Trajectory& traj, int t0, const RolloutConfig& cfg,
                          const Components& c, RolloutMode mode) {
  cfg.validate();
  c.check(mode);
  if (t0 < 0 || t0 + cfg.horizon >= traj.length()) {
    throw ConfigError("trajectory has " + std::to_string(traj.length()) + " frames; t0=" +
                      std::to_string(t0) + " with horizon " + std::to_string(cfg.horizon) +
                      " needs " + std::to_string(t0 + cfg.horizon + 1));
  }
  const int k = mode == RolloutMode::Hybrid ? budget_blocks(cfg.budget, c.partition.count()) : 0;
  const HannWindow win = cfg.hann ? hann_window(c.partition.block) : flat_window(c.partition.block);
  const std::uint64_t run_seed = derive_seed(cfg.seed, derive_seed(traj.seed, static_cast<std::uint64_t>(t0)));
  RolloutResult r;
  Tensor x = traj.frames[static_cast<std::size_t>(t0)];
  for (int step = 0; step < cfg.horizon; ++step) {
    const Tensor& truth = traj.frames[static_cast<std::size_t>(t0 + step + 1)];
    Tensor next;
    if (mode == RolloutMode::Raw) {
      next = c.host->forecast(x);
    } else {
      auto s = rollout_step(x, c, k, cfg.policy, win, cfg.risk, &truth,
                            derive_seed(run_seed, static_cast<std::uint64_t>(step)));
      next = std::move(s.next);
      if (mode == RolloutMode::Hybrid) r.selected.push_back(std::move(s.selected));
    }
    if (!next.all_finite()) throw NumericError("rollout diverged at step " + std::to_string(step + 1));
    r.step_losses.push_back(uv_relative_l2(next, truth));
    if (cfg.keep_fields) r.fields.push_back(next);
    x = std::move(next);
  }
  double s = 0.0;
  for (double l : r.step_losses) s += l;
  r.loss = s / static_cast<double>(r.step_losses.size());
  r.final_state = std::move(x);
  return r;
}

std::vector<double> static_mask(std::span<const Trajectory> train, const Components& c,
                                std::span<const int> t0_pool, const RiskConfig& risk) {
  c.check(RolloutMode::Global);
  std::vector<std::vector<double>> per_sample;
  for (const auto& traj : train) {
    for (int t0 : t0_pool) {
      if (t0 >= traj.length()) continue;
      const Tensor& x = traj.frames[static_cast<std::size_t>(t0)];
      const Tensor x_g = c.global->apply(x, c.host->forecast(x));
      per_sample.push_back(risk_scores(x, x_g, c.partition, risk));
    }
  }
  return average_scores(std::move(per_sample));
}

double first_step_gini(const Trajectory& traj, int t0, const Components& c, RolloutMode mode) {
  const Tensor& x = traj.frames.at(static_cast<std::size_t>(t0));
  const Tensor& truth = traj.frames.at(static_cast<std::size_t>(t0) + 1);
  Tensor pred = c.host->forecast(x);
  if (mode != RolloutMode::Raw) pred = c.global->apply(x, pred);
  auto e = oracle_scores(pred, truth, c.partition);
  for (double& v : e) v *= v;
  return gini(e);
}

namespace {

struct RunKey {
  int trajectory;
  int t0;
};

std::vector<RunKey> run_keys(std::span<const Trajectory> trajs, std::span<const int> t0_pool) {
  if (trajs.empty() || t0_pool.empty()) throw ConfigError("evaluation needs trajectories and a t0 pool");
  std::vector<RunKey> keys;
  for (int i = 0; i < static_cast<int>(trajs.size()); ++i) {
    for (int t0 : t0_pool) keys.push_back({i, t0});
  }
  return keys;
}

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

Evaluation evaluate(std::span<const Trajectory> trajs, std::span<const int> t0_pool,
                    const RolloutConfig& cfg, const Components& c, const EvalOptions& opt) {
  cfg.validate();
  c.check(RolloutMode::Hybrid);
  const auto keys = run_keys(trajs, t0_pool);
  Evaluation ev;
  ev.runs.resize(keys.size());
  std::vector<double> gini_raw(keys.size()), gini_glob(keys.size());
  parallel_for(static_cast<int>(keys.size()), opt.workers, [&](int i) {
    const auto& key = keys[static_cast<std::size_t>(i)];
    const auto& traj = trajs[static_cast<std::size_t>(key.trajectory)];
    auto& rec = ev.runs[static_cast<std::size_t>(i)];
    rec.trajectory = key.trajectory;
    rec.t0 = key.t0;
    rec.raw = run_rollout(traj, key.t0, cfg, c, RolloutMode::Raw);
    rec.global = run_rollout(traj, key.t0, cfg, c, RolloutMode::Global);
    rec.hybrid = run_rollout(traj, key.t0, cfg, c, RolloutMode::Hybrid);
    rec.audit = audit(rec.raw.loss, rec.global.loss, rec.hybrid.loss);
    gini_raw[static_cast<std::size_t>(i)] = first_step_gini(traj, key.t0, c, RolloutMode::Raw);
    gini_glob[static_cast<std::size_t>(i)] = first_step_gini(traj, key.t0, c, RolloutMode::Global);
  });

  std::vector<double> raw, glob, hyb, shares, gains, jac;
  int wins = 0;
  for (const auto& r : ev.runs) {
    raw.push_back(r.raw.loss);
    glob.push_back(r.global.loss);
    hyb.push_back(r.hybrid.loss);
    shares.push_back(r.audit.global_share);
    gains.push_back(r.audit.local_gain);
    if (r.hybrid.loss < r.raw.loss) ++wins;
    const auto j = jaccard_stability(r.hybrid.selected);
    jac.insert(jac.end(), j.begin(), j.end());
  }
  auto& s = ev.summary;
  s.runs = static_cast<int>(ev.runs.size());
  s.raw_ratio = median_of_ratios(raw, raw);
  s.global_ratio = median_of_ratios(glob, raw);
  s.hybrid_ratio = median_of_ratios(hyb, raw);
  s.global_ci = bootstrap_median_ci(paired_ratios(glob, raw), opt.bootstrap_replicates, opt.alpha,
                                    derive_seed(cfg.seed, 1), opt.workers);
  s.hybrid_ci = bootstrap_median_ci(paired_ratios(hyb, raw), opt.bootstrap_replicates, opt.alpha,
                                    derive_seed(cfg.seed, 2), opt.workers);
  s.sign_p_hybrid = sign_test_p(wins, s.runs);
  s.sign_floor = sign_test_floor(s.runs);
  s.protocol_audit = audit(median(raw), median(glob), median(hyb));
  s.median_global_share = median(shares);
  s.median_local_gain = median(gains);
  s.mean_jaccard = jac.empty() ? 1.0 : mean(jac);
  s.raw_gini = mean(gini_raw);
  s.global_gini = mean(gini_glob);
  return ev;
}

BudgetSweep budget_sweep(std::span<const Trajectory> trajs, std::span<const int> t0_pool,
                         std::span<const double> fractions, const RolloutConfig& cfg,
                         const Components& c, const EvalOptions& opt) {
  cfg.validate();
  c.check(RolloutMode::Hybrid);
  if (fractions.empty()) throw ConfigError("budget sweep needs at least one budget");
  const auto keys = run_keys(trajs, t0_pool);
  const int n_runs = static_cast<int>(keys.size());
  const int n_points = static_cast<int>(fractions.size());
  BudgetSweep out;
  out.raw_losses.resize(keys.size());
  out.points.resize(fractions.size());
  for (int p = 0; p < n_points; ++p) {
    auto& pt = out.points[static_cast<std::size_t>(p)];
    pt.budget = fractions[static_cast<std::size_t>(p)];
    pt.k = budget_blocks(pt.budget, c.partition.count());
    pt.losses.resize(keys.size());
  }
  // Task layout: first the raw runs, then every (budget, run) pair.
  parallel_for(n_runs * (n_points + 1), opt.workers, [&](int task) {
    const int run = task % n_runs;
    const int slot = task / n_runs;
    const auto& key = keys[static_cast<std::size_t>(run)];
    const auto& traj = trajs[static_cast<std::size_t>(key.trajectory)];
    if (slot == 0) {
      out.raw_losses[static_cast<std::size_t>(run)] = run_rollout(traj, key.t0, cfg, c, RolloutMode::Raw).loss;
      return;
    }
    auto pcfg = cfg;
    pcfg.budget = fractions[static_cast<std::size_t>(slot - 1)];
    out.points[static_cast<std::size_t>(slot - 1)].losses[static_cast<std::size_t>(run)] =
        run_rollout(traj, key.t0, pcfg, c, RolloutMode::Hybrid).loss;
  });
  for (int p = 0; p < n_points; ++p) {
    auto& pt = out.points[static_cast<std::size_t>(p)];
    const auto ratios = paired_ratios(pt.losses, out.raw_losses);
    pt.median_ratio = median(ratios);
    pt.ci = bootstrap_median_ci(ratios, opt.bootstrap_replicates, opt.alpha,
                                derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(p)), opt.workers);
  }
  return out;
}

std::string block_mask(std::span<const int> selected, int block_count) {
  const int nibbles = (block_count + 3) / 4;
  std::vector<int> bits(static_cast<std::size_t>(nibbles) * 4, 0);
  for (int b : selected) {
    if (b < 0 || b >= block_count) throw GeometryError("block index out of range in mask");
    bits[static_cast<std::size_t>(b)] = 1;
  }
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (int n = nibbles - 1; n >= 0; --n) {
    int v = 0;
    for (int q = 3; q >= 0; --q) v = 2 * v + bits[static_cast<std::size_t>(4 * n + q)];
    s.push_back(hex[v]);
  }
  return s;
}

nlohmann::json rollout_to_json(const RolloutResult& r, int block_count) {
  nlohmann::json j{{"loss", r.loss}, {"step_losses", r.step_losses}};
  if (!r.selected.empty()) {
    auto masks = nlohmann::json::array();
    for (const auto& s : r.selected) masks.push_back(block_mask(s, block_count));
    j["selected"] = masks;
  }
  return j;
}

nlohmann::json EvaluationSummary::to_json() const {
  return {{"runs", runs},
          {"median_ratio", {{"raw", raw_ratio}, {"global", global_ratio}, {"hybrid", hybrid_ratio}}},
          {"ci_global", {global_ci.lo, global_ci.hi}},
          {"ci_hybrid", {hybrid_ci.lo, hybrid_ci.hi}},
          {"sign_test_p_hybrid", sign_p_hybrid},
          {"sign_test_floor", sign_floor},
          {"protocol_audit",
           {{"A", protocol_audit.global_share},
            {"J_loc", protocol_audit.local_gain},
            {"total", protocol_audit.total}}},
          {"median_A", median_global_share},
          {"median_J_loc", median_local_gain},
          {"mean_jaccard", mean_jaccard},
          {"gini_first_step", {{"raw", raw_gini}, {"global", global_gini}}}};
}

nlohmann::json evaluation_to_json(const Evaluation& e, int block_count) {
  auto runs = nlohmann::json::array();
  for (const auto& r : e.runs) {
    runs.push_back({{"trajectory", r.trajectory},
                    {"t0", r.t0},
                    {"raw", rollout_to_json(r.raw, block_count)},
                    {"global", rollout_to_json(r.global, block_count)},
                    {"hybrid", rollout_to_json(r.hybrid, block_count)},
                    {"audit",
                     {{"A", r.audit.global_share}, {"J_loc", r.audit.local_gain}, {"total", r.audit.total}}}});
  }
  return {{"summary", e.summary.to_json()}, {"runs", runs}};
}

nlohmann::json sweep_to_json(const BudgetSweep& s) {
  auto pts = nlohmann::json::array();
  for (const auto& p : s.points) {
    pts.push_back({{"budget", p.budget},
                   {"k", p.k},
                   {"median_ratio", p.median_ratio},
                   {"ci", {p.ci.lo, p.ci.hi}},
                   {"losses", p.losses}});
  }
  return {{"raw_losses", s.raw_losses}, {"points", pts}};
}

}  // namespace haloroute
