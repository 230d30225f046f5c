#include "haloroute/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "haloroute/diagnostics.hpp"
#include "haloroute/hash.hpp"
#include "haloroute/parallel.hpp"
#include "haloroute/rng.hpp"

namespace haloroute {

namespace fs = std::filesystem;

namespace {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

fs::path with_ext(const fs::path& base, const char* ext) { return fs::path(base.string() + ext); }

int max_of(const std::vector<int>& v) { return v.empty() ? 0 : *std::max_element(v.begin(), v.end()); }

std::vector<Trajectory> load_split(const ExperimentConfig& cfg, const std::string& split) {
  const auto dir = cfg.data_dir(split);
  if (!fs::exists(dir / "manifest.json")) {
    throw DependencyError("no " + split + " dataset under " + dir.string() + "; run gen-data first");
  }
  auto data = read_dataset(dir);
  if (data.empty()) throw DependencyError(split + " dataset is empty");
  const auto& sc = data.front().config;
  if (sc.height != cfg.solver.height || sc.width != cfg.solver.width) {
    throw ConfigError(split + " dataset grid " + std::to_string(sc.height) + "x" + std::to_string(sc.width) +
                      " does not match the configured " + std::to_string(cfg.solver.height) + "x" +
                      std::to_string(cfg.solver.width));
  }
  return data;
}

std::string dataset_hash(const ExperimentConfig& cfg, const std::string& split) {
  return file_content_hash(cfg.data_dir(split) / "manifest.json");
}

std::string checkpoint_hash(const fs::path& base) { return file_content_hash(with_ext(base, ".bin")); }

void require_checkpoint(const fs::path& base, const std::string& what, const std::string& stage) {
  if (!fs::exists(with_ext(base, ".bin")) || !fs::exists(with_ext(base, ".json"))) {
    throw DependencyError(what + " checkpoint missing at " + base.string() + "; run `train --stage " +
                          stage + "` first");
  }
}

GlobalCorrector load_global(const fs::path& base) {
  const auto m = read_json(with_ext(base, ".json"));
  GlobalCorrector g(GlobalCorrectorConfig::from_json(m.at("config")), m.at("height").get<int>(),
                    m.at("width").get<int>());
  nn::load_checkpoint(base, g.parameters());
  return g;
}

LocalRefiner load_local(const fs::path& base) {
  const auto m = read_json(with_ext(base, ".json"));
  LocalRefiner l(LocalRefinerConfig::from_json(m.at("config")));
  nn::load_checkpoint(base, l.parameters());
  return l;
}

SurrogateHost make_host(const ExperimentConfig& cfg, const std::vector<Trajectory>& data) {
  return SurrogateHost(cfg.host, data.front().config);
}

void check_truth(const ExperimentConfig& cfg, Policy p) {
  if (p == Policy::Oracle && !cfg.truth_available) {
    throw DependencyError("oracle routing needs ground truth, but this evaluation is configured truth-free");
  }
}

nlohmann::json header(const ExperimentConfig& cfg, const std::string& command, const nlohmann::json& inputs) {
  return {{"command", command}, {"experiment", cfg.experiment}, {"config", cfg.to_json()}, {"inputs", inputs}};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

nlohmann::json field_summary(const std::vector<const Tensor*>& fields) {
  double div = 0.0, ke = 0.0, ens = 0.0, hb = 0.0;
  for (const Tensor* f : fields) {
    const auto r = diagnose(*f);
    div += r.divergence;
    ke += r.kinetic_energy;
    ens += r.enstrophy;
    hb += r.high_band_energy;
  }
  const double n = static_cast<double>(fields.size());
  return {{"divergence", div / n}, {"kinetic_energy", ke / n}, {"enstrophy", ens / n}, {"high_band_energy", hb / n}};
}

Evaluation run_evaluation(const ExperimentConfig& cfg, const std::vector<Trajectory>& test,
                          const LoadedModels& m, const RolloutConfig& rc) {
  check_truth(cfg, rc.policy);
  return evaluate(test, cfg.eval_t0_pool, rc, m.view, cfg.eval_options());
}

void ensure_static(const ExperimentConfig& cfg, LoadedModels& m) {
  if (!m.static_scores.empty()) return;
  const auto train = load_split(cfg, "train");
  m.static_scores = static_mask(train, m.view, cfg.train.t0_pool_patch, cfg.rollout.risk);
  m.view.static_scores = &m.static_scores;
  m.hashes["train_data"] = dataset_hash(cfg, "train");
}

}  // namespace

// ---- config -----------------------------------------------------------------

void ExperimentConfig::derive_seeds() {
  solver.seed = derive_seed(seed, 1);
  global.seed = derive_seed(seed, 2);
  local.seed = derive_seed(seed, 3);
  train.seed = derive_seed(seed, 4);
  rollout.seed = derive_seed(seed, 5);
}

void ExperimentConfig::validate() const {
  haloroute::validate(solver);
  train.validate();
  rollout.validate();
  if (train_trajectories < 2) throw ConfigError("need at least 2 training trajectories (train + validation)");
  if (test_trajectories < 1) throw ConfigError("need at least 1 test trajectory");
  if (eval_t0_pool.empty()) throw ConfigError("eval_t0_pool is empty");
  const int need = std::max({max_of(eval_t0_pool) + rollout.horizon,
                             max_of(train.t0_pool_global) + train.ar_depth,
                             max_of(train.t0_pool_ar) + train.ar_depth, max_of(train.t0_pool_patch) + 1}) + 1;
  if (frames < need) {
    throw ConfigError("frames=" + std::to_string(frames) + " but the t0 pools and horizons need " +
                      std::to_string(need));
  }
  if (solver.height % local.block || solver.width % local.block) {
    throw ConfigError("grid must be a multiple of the block size");
  }
  if (bootstrap_replicates < 1) throw ConfigError("bootstrap_replicates must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  for (double b : budget_grid) {
    if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("budget grid values must lie in [0, 1]");
  }
  for (int n : data_sizes) {
    if (n < 2 || n > train_trajectories) throw ConfigError("data_sizes must lie in [2, train_trajectories]");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"experiment", experiment},
          {"seed", seed},
          {"out", out.generic_string()},
          {"solver", solver_to_json(solver)},
          {"host", host_to_json(host)},
          {"data", {{"train_trajectories", train_trajectories}, {"test_trajectories", test_trajectories}, {"frames", frames}}},
          {"global", global.to_json()},
          {"local", local.to_json()},
          {"train", train.to_json()},
          {"rollout", rollout.to_json()},
          {"eval",
           {{"t0_pool", eval_t0_pool},
            {"bootstrap_replicates", bootstrap_replicates},
            {"alpha", alpha},
            {"workers", workers},
            {"truth_available", truth_available}}},
          {"sweep", {{"budgets", budget_grid}, {"lambda_ke", lambda_grid}, {"data_sizes", data_sizes}}}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be an object");
  static const std::set<std::string> known{"experiment", "seed",  "out",   "solver", "host",  "data",
                                           "global",     "local", "train", "rollout", "eval", "sweep"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  if (!j.contains("seed")) throw ConfigError("config must set 'seed'");
  ExperimentConfig c;
  c.experiment = get_or<std::string>(j, "experiment", c.experiment);
  c.seed = get_or<std::uint64_t>(j, "seed", 0);
  c.out = get_or<std::string>(j, "out", c.out.string());
  const auto sub = [&](const char* key) { return j.contains(key) ? j.at(key) : nlohmann::json::object(); };
  c.solver = solver_from_json(sub("solver"));
  c.host = host_from_json(sub("host"));
  const auto d = sub("data");
  c.train_trajectories = get_or(d, "train_trajectories", c.train_trajectories);
  c.test_trajectories = get_or(d, "test_trajectories", c.test_trajectories);
  c.frames = get_or(d, "frames", c.frames);
  try {
    c.global = GlobalCorrectorConfig::from_json(sub("global"));
    c.local = LocalRefinerConfig::from_json(sub("local"));
    c.train = TrainConfig::from_json(sub("train"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.rollout = RolloutConfig::from_json(sub("rollout"));
  const auto e = sub("eval");
  c.eval_t0_pool = get_or(e, "t0_pool", c.eval_t0_pool);
  c.bootstrap_replicates = get_or(e, "bootstrap_replicates", c.bootstrap_replicates);
  c.alpha = get_or(e, "alpha", c.alpha);
  c.workers = get_or(e, "workers", c.workers);
  c.truth_available = get_or(e, "truth_available", c.truth_available);
  const auto s = sub("sweep");
  c.budget_grid = get_or(s, "budgets", c.budget_grid);
  c.lambda_grid = get_or(s, "lambda_ke", c.lambda_grid);
  c.data_sizes = get_or(s, "data_sizes", c.data_sizes);
  c.derive_seeds();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return from_json(read_json(path));
}

EvalOptions ExperimentConfig::eval_options() const {
  EvalOptions o;
  o.bootstrap_replicates = bootstrap_replicates;
  o.alpha = alpha;
  o.workers = worker_count(workers);
  return o;
}

Stage parse_stage(const std::string& s) {
  if (s == "global") return Stage::Global;
  if (s == "local-patch") return Stage::LocalPatch;
  if (s == "local-ar") return Stage::LocalAr;
  throw ConfigError("unknown stage '" + s + "' (global, local-patch, local-ar)");
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Global: return "global";
    case Stage::LocalPatch: return "local-patch";
    case Stage::LocalAr: return "local-ar";
  }
  return "?";
}

// ---- io ---------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = with_ext(path, ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << text;
    if (!os) throw ConfigError("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

// ---- models -----------------------------------------------------------------

std::unique_ptr<LoadedModels> load_models(const ExperimentConfig& cfg, RolloutMode need) {
  SolverConfig sc = cfg.solver;
  const auto test_manifest = cfg.data_dir("test") / "manifest.json";
  if (fs::exists(test_manifest)) sc = solver_from_json(read_json(test_manifest).at("solver"));
  auto m = std::unique_ptr<LoadedModels>(new LoadedModels{SurrogateHost(cfg.host, sc), {}, {}, {}, {}, {}});
  m->hashes = {{"host", host_to_json(cfg.host)}};
  const auto gbase = cfg.checkpoint("global");
  const auto lbase = cfg.checkpoint("local_ar");
  if (need != RolloutMode::Raw) require_checkpoint(gbase, "global corrector", "global");
  if (need == RolloutMode::Hybrid) require_checkpoint(lbase, "local refiner", "local-ar");
  if (fs::exists(with_ext(gbase, ".bin"))) {
    m->global.emplace(load_global(gbase));
    m->hashes["global"] = checkpoint_hash(gbase);
  }
  if (fs::exists(with_ext(lbase, ".bin"))) {
    m->local.emplace(load_local(lbase));
    m->hashes["local_ar"] = checkpoint_hash(lbase);
  }
  m->view.host = &m->host;
  m->view.global = m->global ? &*m->global : nullptr;
  m->view.local = m->local ? &*m->local : nullptr;
  m->view.partition = make_partition(sc.height, sc.width, cfg.local.block, cfg.local.halo);
  m->view.check(need);
  return m;
}

// ---- gen-data ---------------------------------------------------------------

nlohmann::json cmd_gen_data(const ExperimentConfig& cfg) {
  SolverConfig test_solver = cfg.solver;
  test_solver.seed = derive_seed(cfg.solver.seed, 0x7e57);
  write_dataset(cfg.data_dir("train"), generate_dataset(cfg.solver, cfg.train_trajectories, cfg.frames));
  write_dataset(cfg.data_dir("test"), generate_dataset(test_solver, cfg.test_trajectories, cfg.frames));
  return {{"train", dataset_hash(cfg, "train")}, {"test", dataset_hash(cfg, "test")}};
}

// ---- train ------------------------------------------------------------------

namespace {

struct StageFiles {
  fs::path state;
  fs::path log;
};

StageFiles prepare_stage(const ExperimentConfig& cfg, const std::string& name, const nlohmann::json& identity,
                         const TrainOptions& opt) {
  StageFiles f{cfg.out / "state" / name, cfg.out / "logs" / (name + ".jsonl")};
  const auto id_path = f.state / "stage.json";
  const std::string id = content_hash(identity.dump());
  if (opt.fresh) fs::remove_all(f.state);
  bool resuming = false;
  if (fs::exists(id_path)) {
    if (read_json(id_path).value("identity", "") != id) {
      throw ConfigError("saved " + name + " state in " + f.state.string() +
                        " was made with different inputs; rerun with --fresh");
    }
    resuming = fs::exists(f.state / "state.json");
  } else {
    fs::remove_all(f.state);
    write_json(id_path, {{"identity", id}});
  }
  fs::create_directories(f.log.parent_path());
  if (!resuming) std::ofstream(f.log, std::ios::trunc);
  return f;
}

StageControl make_control(const StageFiles& f, const TrainOptions& opt) {
  StageControl c;
  c.state_dir = f.state;
  c.stop_after = opt.stop_after;
  const auto log = f.log;
  c.log = [log](const nlohmann::json& rec) {
    std::ofstream os(log, std::ios::app);
    os << rec.dump() << '\n';
  };
  return c;
}

nlohmann::json stage_report(const std::string& name, const StageResult& r) {
  return {{"stage", name},
          {"completed", r.completed},
          {"epochs_run", r.epochs_run},
          {"initial_validation", r.initial_validation},
          {"best_validation", r.best_validation}};
}

}  // namespace

nlohmann::json cmd_train(const ExperimentConfig& cfg, Stage stage, const TrainOptions& opt) {
  const auto train = load_split(cfg, "train");
  const SurrogateHost host = make_host(cfg, train);
  const int H = cfg.solver.height, W = cfg.solver.width;
  nlohmann::json upstream{{"train_data", dataset_hash(cfg, "train")}, {"host", host_to_json(cfg.host)}};
  const std::string name = to_string(stage);
  const auto gbase = cfg.checkpoint("global");
  const auto pbase = cfg.checkpoint("local_patch");

  if (stage == Stage::Global) {
    GlobalCorrector g(cfg.global, H, W);
    g.set_clip_bound(clip_calibration(train, host, cfg.train.t0_pool_global));
    const auto files = prepare_stage(cfg, name, {{"upstream", upstream}, {"global", g.config().to_json()},
                                                 {"train", cfg.train.to_json()}}, opt);
    const auto r = train_global(g, train, host, cfg.train, make_control(files, opt));
    auto report = stage_report(name, r);
    if (!r.completed) return report;
    auto params = g.parameters();
    nn::save_checkpoint(gbase, nn::ConstParameterList(params.begin(), params.end()),
                        {{"kind", "global"}, {"config", g.config().to_json()}, {"height", H}, {"width", W}});
    report["checkpoint"] = checkpoint_hash(gbase);
    report["upstream"] = upstream;
    write_json(with_ext(gbase, ".manifest.json"), report);
    return report;
  }

  require_checkpoint(gbase, "global corrector", "global");
  const GlobalCorrector g = load_global(gbase);
  upstream["global"] = checkpoint_hash(gbase);
  std::optional<LocalRefiner> local;
  fs::path base;
  if (stage == Stage::LocalPatch) {
    local.emplace(cfg.local);
    base = pbase;
  } else {
    require_checkpoint(pbase, "patch-pretrained refiner", "local-patch");
    local.emplace(load_local(pbase));
    upstream["local_patch"] = checkpoint_hash(pbase);
    base = cfg.checkpoint("local_ar");
  }
  const auto files = prepare_stage(cfg, name, {{"upstream", upstream}, {"local", local->config().to_json()},
                                               {"train", cfg.train.to_json()}}, opt);
  const auto control = make_control(files, opt);
  const auto r = stage == Stage::LocalPatch ? train_local_patch(*local, train, host, g, cfg.train, control)
                                            : train_local_ar(*local, train, host, g, cfg.train, control);
  auto report = stage_report(name, r);
  if (!r.completed) return report;
  auto params = local->parameters();
  nn::save_checkpoint(base, nn::ConstParameterList(params.begin(), params.end()),
                      {{"kind", name}, {"config", local->config().to_json()}});
  report["checkpoint"] = checkpoint_hash(base);
  report["upstream"] = upstream;
  write_json(with_ext(base, ".manifest.json"), report);
  return report;
}

// ---- evaluate ---------------------------------------------------------------

nlohmann::json cmd_evaluate(const ExperimentConfig& cfg) {
  const auto test = load_split(cfg, "test");
  auto m = load_models(cfg, RolloutMode::Hybrid);
  if (cfg.rollout.policy == Policy::Static) ensure_static(cfg, *m);
  auto inputs = m->hashes;
  inputs["test_data"] = dataset_hash(cfg, "test");
  const auto ev = run_evaluation(cfg, test, *m, cfg.rollout);

  std::vector<const Tensor*> raw, glob, hyb, truth;
  for (const auto& r : ev.runs) {
    raw.push_back(&r.raw.final_state);
    glob.push_back(&r.global.final_state);
    hyb.push_back(&r.hybrid.final_state);
    truth.push_back(&test[static_cast<std::size_t>(r.trajectory)].frames[static_cast<std::size_t>(r.t0 + cfg.rollout.horizon)]);
  }
  auto out = header(cfg, "evaluate", inputs);
  out["results"] = evaluation_to_json(ev, m->view.partition.count());
  out["diagnostics"] = {{"truth", field_summary(truth)},
                        {"raw", field_summary(raw)},
                        {"global", field_summary(glob)},
                        {"hybrid", field_summary(hyb)}};
  write_json(cfg.results_dir() / "evaluate.json", out);
  return out;
}

// ---- sweep ------------------------------------------------------------------

nlohmann::json cmd_sweep(const ExperimentConfig& cfg, const std::string& axis) {
  const auto test = load_split(cfg, "test");
  std::ostringstream csv;
  nlohmann::json points = nlohmann::json::array();
  nlohmann::json inputs;

  if (axis == "budget") {
    auto m = load_models(cfg, RolloutMode::Hybrid);
    if (cfg.rollout.policy == Policy::Static) ensure_static(cfg, *m);
    check_truth(cfg, cfg.rollout.policy);
    inputs = m->hashes;
    const auto sw = budget_sweep(test, cfg.eval_t0_pool, cfg.budget_grid, cfg.rollout, m->view, cfg.eval_options());
    csv << "budget,k,median_ratio,ci_lo,ci_hi\n";
    for (const auto& p : sw.points) {
      csv << fmt(p.budget) << ',' << p.k << ',' << fmt(p.median_ratio) << ',' << fmt(p.ci.lo) << ','
          << fmt(p.ci.hi) << '\n';
    }
    points = sweep_to_json(sw);
  } else if (axis == "lambda_ke") {
    auto m = load_models(cfg, RolloutMode::Hybrid);
    inputs = m->hashes;
    csv << "lambda_ke,hybrid_ratio,ci_lo,ci_hi,median_J_loc\n";
    for (double lam : cfg.lambda_grid) {
      auto rc = cfg.rollout;
      rc.risk.lambda_ke = lam;
      const auto s = run_evaluation(cfg, test, *m, rc).summary;
      points.push_back({{"lambda_ke", lam}, {"summary", s.to_json()}});
      csv << fmt(lam) << ',' << fmt(s.hybrid_ratio) << ',' << fmt(s.hybrid_ci.lo) << ',' << fmt(s.hybrid_ci.hi)
          << ',' << fmt(s.median_local_gain) << '\n';
    }
  } else if (axis == "data_size") {
    csv << "train_trajectories,global_ratio,hybrid_ratio,median_J_loc\n";
    for (int n : cfg.data_sizes) {
      ExperimentConfig sub = cfg;
      sub.out = cfg.out / "sweep" / ("data_size_" + std::to_string(n));
      sub.train_trajectories = n;
      fs::create_directories(sub.out / "data");
      const auto train = load_split(cfg, "train");
      write_dataset(sub.data_dir("train"), std::vector<Trajectory>(train.begin(), train.begin() + n));
      fs::remove_all(sub.data_dir("test"));
      fs::copy(cfg.data_dir("test"), sub.data_dir("test"), fs::copy_options::recursive);
      for (Stage st : {Stage::Global, Stage::LocalPatch, Stage::LocalAr}) cmd_train(sub, st, {-1, true});
      auto m = load_models(sub, RolloutMode::Hybrid);
      if (sub.rollout.policy == Policy::Static) ensure_static(sub, *m);
      const auto s = run_evaluation(sub, test, *m, sub.rollout).summary;
      inputs[std::to_string(n)] = m->hashes;
      points.push_back({{"train_trajectories", n}, {"summary", s.to_json()}});
      csv << n << ',' << fmt(s.global_ratio) << ',' << fmt(s.hybrid_ratio) << ',' << fmt(s.median_local_gain)
          << '\n';
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "' (budget, lambda_ke, data_size)");
  }
  inputs["test_data"] = dataset_hash(cfg, "test");
  auto out = header(cfg, "sweep", inputs);
  out["axis"] = axis;
  out["results"] = points;
  write_json(cfg.results_dir() / ("sweep_" + axis + ".json"), out);
  write_text(cfg.results_dir() / ("sweep_" + axis + ".csv"), csv.str());
  return out;
}

// ---- ablate -----------------------------------------------------------------

nlohmann::json cmd_ablate(const ExperimentConfig& cfg, const std::string& which) {
  const auto test = load_split(cfg, "test");
  auto m = load_models(cfg, RolloutMode::Hybrid);
  auto variant = cfg.rollout;
  std::string tag = which;
  if (which == "hann_off") {
    variant.hann = false;
  } else if (which == "static_mask") {
    variant.policy = Policy::Static;
  } else if (which.rfind("policy=", 0) == 0) {
    variant.policy = parse_policy(which.substr(7));
    tag = "policy_" + which.substr(7);
  } else {
    throw ConfigError("unknown ablation '" + which + "' (hann_off, static_mask, policy=<name>)");
  }
  check_truth(cfg, variant.policy);
  if (variant.policy == Policy::Static || cfg.rollout.policy == Policy::Static) ensure_static(cfg, *m);

  const auto base = run_evaluation(cfg, test, *m, cfg.rollout);
  const auto alt = run_evaluation(cfg, test, *m, variant);
  std::vector<double> b, a;
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream csv;
  csv << "trajectory,t0,raw,baseline,variant,ratio_to_baseline\n";
  for (std::size_t i = 0; i < base.runs.size(); ++i) {
    const auto& r0 = base.runs[i];
    const double lb = r0.hybrid.loss, lv = alt.runs[i].hybrid.loss;
    b.push_back(lb);
    a.push_back(lv);
    rows.push_back({{"trajectory", r0.trajectory},
                    {"t0", r0.t0},
                    {"raw", r0.raw.loss},
                    {"baseline", lb},
                    {"variant", lv},
                    {"ratio_to_baseline", lv / lb}});
    csv << r0.trajectory << ',' << r0.t0 << ',' << fmt(r0.raw.loss) << ',' << fmt(lb) << ',' << fmt(lv) << ','
        << fmt(lv / lb) << '\n';
  }
  auto inputs = m->hashes;
  inputs["test_data"] = dataset_hash(cfg, "test");
  auto out = header(cfg, "ablate", inputs);
  out["ablation"] = which;
  out["variant"] = variant.to_json();
  out["results"] = {{"baseline", base.summary.to_json()},
                    {"variant", alt.summary.to_json()},
                    {"median_ratio_to_baseline", median_of_ratios(a, b)},
                    {"median_baseline_loss", median(b)},
                    {"median_variant_loss", median(a)},
                    {"runs", rows}};
  write_json(cfg.results_dir() / ("ablate_" + tag + ".json"), out);
  write_text(cfg.results_dir() / ("ablate_" + tag + ".csv"), csv.str());
  return out;
}

// ---- audit ------------------------------------------------------------------

nlohmann::json cmd_audit(const ExperimentConfig& cfg, const fs::path& results) {
  const fs::path path = results.empty() ? cfg.results_dir() / "evaluate.json" : results;
  if (!fs::exists(path)) throw DependencyError("no evaluation results at " + path.string() + "; run evaluate first");
  const auto ev = read_json(path);
  std::vector<double> raw, glob, hyb;
  nlohmann::json rows = nlohmann::json::array();
  double worst = 0.0;
  try {
    for (const auto& r : ev.at("results").at("runs")) {
      raw.push_back(r.at("raw").at("loss").get<double>());
      glob.push_back(r.at("global").at("loss").get<double>());
      hyb.push_back(r.at("hybrid").at("loss").get<double>());
      const auto a = audit(raw.back(), glob.back(), hyb.back());
      worst = std::max(worst, a.identity_residual());
      rows.push_back({{"trajectory", r.at("trajectory")},
                      {"t0", r.at("t0")},
                      {"A", a.global_share},
                      {"J_loc", a.local_gain},
                      {"total", a.total}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed evaluation results: " + std::string(e.what()));
  }
  if (raw.empty()) throw NumericError("evaluation results hold no runs");
  const auto p = audit(median(raw), median(glob), median(hyb));
  std::vector<double> as, js;
  for (const auto& r : rows) {
    as.push_back(r["A"]);
    js.push_back(r["J_loc"]);
  }
  auto out = header(cfg, "audit", {{"evaluation", file_content_hash(path)}});
  out["results"] = {{"protocol", {{"A", p.global_share}, {"J_loc", p.local_gain}, {"total", p.total}}},
                    {"median_A", median(as)},
                    {"median_J_loc", median(js)},
                    {"max_identity_residual", worst},
                    {"runs", rows}};
  write_json(cfg.results_dir() / "audit.json", out);
  return out;
}

// ---- diagnose ---------------------------------------------------------------

nlohmann::json cmd_diagnose(const ExperimentConfig& cfg) {
  const auto test = load_split(cfg, "test");
  auto m = load_models(cfg, RolloutMode::Raw);
  std::vector<RolloutMode> modes{RolloutMode::Raw};
  if (m->view.global) modes.push_back(RolloutMode::Global);
  if (m->view.global && m->view.local) modes.push_back(RolloutMode::Hybrid);
  if (cfg.rollout.policy == Policy::Static && modes.size() == 3) ensure_static(cfg, *m);
  check_truth(cfg, cfg.rollout.policy);

  struct Key {
    int traj, t0;
  };
  std::vector<Key> keys;
  for (int i = 0; i < static_cast<int>(test.size()); ++i) {
    for (int t0 : cfg.eval_t0_pool) keys.push_back({i, t0});
  }
  // finals[mode][run]
  std::vector<std::vector<Tensor>> finals(modes.size(), std::vector<Tensor>(keys.size()));
  parallel_for(static_cast<int>(keys.size() * modes.size()), worker_count(cfg.workers), [&](int task) {
    const auto mi = static_cast<std::size_t>(task) / keys.size();
    const auto ri = static_cast<std::size_t>(task) % keys.size();
    finals[mi][ri] = run_rollout(test[static_cast<std::size_t>(keys[ri].traj)], keys[ri].t0, cfg.rollout, m->view,
                                 modes[mi]).final_state;
  });

  const int H = cfg.solver.height, W = cfg.solver.width;
  nlohmann::json per_mode;
  auto emit = [&](const std::string& name, const std::vector<const Tensor*>& initial,
                  const std::vector<const Tensor*>& final_fields) {
    std::vector<std::vector<double>> spectra;
    for (const Tensor* f : final_fields) spectra.push_back(ke_spectrum(*f));
    const auto avg = average_spectra(spectra);
    const auto s0 = field_summary(initial), s1 = field_summary(final_fields);
    per_mode[name] = {{"initial", s0},
                      {"final", s1},
                      {"ke_drift", drift(s0["kinetic_energy"].get<double>(), s1["kinetic_energy"].get<double>())},
                      {"final_high_band_energy", high_band_energy(avg, H, W)}};
    write_text(cfg.results_dir() / ("spectrum_" + name + ".csv"), spectrum_csv(avg));
  };
  std::vector<const Tensor*> initial, truth;
  for (const auto& k : keys) {
    const auto& fr = test[static_cast<std::size_t>(k.traj)].frames;
    initial.push_back(&fr[static_cast<std::size_t>(k.t0)]);
    truth.push_back(&fr[static_cast<std::size_t>(k.t0 + cfg.rollout.horizon)]);
  }
  emit("truth", initial, truth);
  for (std::size_t mi = 0; mi < modes.size(); ++mi) {
    std::vector<const Tensor*> f;
    for (const auto& t : finals[mi]) f.push_back(&t);
    emit(to_string(modes[mi]), initial, f);
  }
  auto inputs = m->hashes;
  inputs["test_data"] = dataset_hash(cfg, "test");
  auto out = header(cfg, "diagnose", inputs);
  out["results"] = per_mode;
  write_json(cfg.results_dir() / "diagnostics.json", out);
  return out;
}

}  // namespace haloroute
