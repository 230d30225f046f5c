#include "haloroute/correctors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "haloroute/rng.hpp"

namespace haloroute {

namespace {

template <typename T>
T json_get(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.batch(), t.channels(), t.height(), t.width()); }

void require_length(std::span<const Trajectory> data, std::span<const int> indices,
                    std::span<const int> t0_pool, int depth, const char* stage) {
  const int need = *std::max_element(t0_pool.begin(), t0_pool.end()) + depth + 1;
  for (int i : indices) {
    if (data[static_cast<std::size_t>(i)].length() < need) {
      throw ConfigError(std::string(stage) + ": trajectory " + std::to_string(i) + " has " +
                        std::to_string(data[static_cast<std::size_t>(i)].length()) +
                        " frames, needs " + std::to_string(need));
    }
  }
}

std::vector<int> shuffled(std::vector<int> v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  return v;
}

double cosine_lr(double base, long step, long total) {
  if (total <= 1) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
}

std::span<const Tensor> truth_window(const Trajectory& traj, int t0, int depth) {
  return std::span<const Tensor>(traj.frames).subspan(static_cast<std::size_t>(t0) + 1,
                                                      static_cast<std::size_t>(depth));
}

// ---- resumable loop state ---------------------------------------------------

struct LoopState {
  int next = 0;  // next epoch (or eval interval)
  double initial_val = 0.0;
  double best_val = std::numeric_limits<double>::infinity();
  int bad = 0;
  bool finished = false;
  std::vector<std::vector<double>> best;
};

void save_loop_state(const std::filesystem::path& dir, const LoopState& s,
                     const nn::ConstParameterList& params, const nn::AdamW& opt) {
  std::filesystem::create_directories(dir);
  std::vector<nn::Parameter> blob;
  for (std::size_t i = 0; i < params.size(); ++i) {
    blob.push_back({"param." + params[i]->name, params[i]->shape, params[i]->value});
    blob.push_back({"best." + params[i]->name, params[i]->shape, s.best[i]});
    blob.push_back({"adam_m." + params[i]->name, params[i]->shape, opt.first_moment()[i]});
    blob.push_back({"adam_v." + params[i]->name, params[i]->shape, opt.second_moment()[i]});
  }
  nn::ConstParameterList view;
  for (const auto& p : blob) view.push_back(&p);
  nn::write_tensor_blob(dir / "state.tmp.bin", view);
  const nlohmann::json meta{{"next", s.next},       {"initial_val", s.initial_val},
                            {"best_val", s.best_val}, {"bad", s.bad},
                            {"finished", s.finished}, {"adam_step", opt.step_count()}};
  {
    std::ofstream out(dir / "state.tmp.json", std::ios::trunc);
    out << meta.dump(2) << '\n';
    if (!out) throw ConfigError("cannot write training state in " + dir.string());
  }
  std::filesystem::rename(dir / "state.tmp.bin", dir / "state.bin");
  std::filesystem::rename(dir / "state.tmp.json", dir / "state.json");
}

bool load_loop_state(const std::filesystem::path& dir, LoopState& s, const nn::ParameterList& params,
                     nn::AdamW& opt) {
  if (dir.empty() || !std::filesystem::exists(dir / "state.json")) return false;
  nlohmann::json meta;
  try {
    std::ifstream in(dir / "state.json");
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad training state in " + dir.string() + ": " + e.what());
  }
  const auto blob = nn::read_tensor_blob(dir / "state.bin");
  if (blob.size() != 4 * params.size()) throw ConfigError("training state does not match model");
  std::vector<std::vector<double>> m, v;
  s.best.clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = blob[4 * i];
    if (p.name != "param." + params[i]->name || p.shape != params[i]->shape) {
      throw ConfigError("training state tensor " + p.name + " does not match " + params[i]->name);
    }
    params[i]->value = p.value;
    s.best.push_back(blob[4 * i + 1].value);
    m.push_back(blob[4 * i + 2].value);
    v.push_back(blob[4 * i + 3].value);
  }
  opt.set_state(meta.at("adam_step").get<long>(), std::move(m), std::move(v));
  s.next = meta.at("next");
  s.initial_val = meta.at("initial_val");
  s.best_val = meta.at("best_val");
  s.bad = meta.at("bad");
  s.finished = meta.at("finished");
  return true;
}

void emit(const StageControl& control, const nlohmann::json& record) {
  if (control.log) control.log(record);
}

}  // namespace

// ---- GlobalCorrector --------------------------------------------------------

nlohmann::json GlobalCorrectorConfig::to_json() const {
  return {{"width", width},         {"layers", layers},         {"modes", modes},
          {"projection", projection}, {"coordinates", coordinates}, {"clip_bound", clip_bound},
          {"seed", seed}};
}

GlobalCorrectorConfig GlobalCorrectorConfig::from_json(const nlohmann::json& j) {
  GlobalCorrectorConfig c;
  c.width = json_get(j, "width", c.width);
  c.layers = json_get(j, "layers", c.layers);
  c.modes = json_get(j, "modes", c.modes);
  c.projection = json_get(j, "projection", c.projection);
  c.coordinates = json_get(j, "coordinates", c.coordinates);
  c.clip_bound = json_get(j, "clip_bound", c.clip_bound);
  c.seed = json_get(j, "seed", c.seed);
  if (c.width < 1 || c.layers < 0 || c.modes < 1 || c.projection < 1 || !(c.clip_bound > 0.0)) {
    throw ConfigError("invalid global corrector configuration");
  }
  return c;
}

GlobalCorrector::GlobalCorrector(const GlobalCorrectorConfig& cfg, int height, int width)
    : cfg_(cfg), height_(height), width_(width) {
  if (!(cfg.clip_bound > 0.0)) throw ConfigError("clip bound must be positive");
  if (2 * cfg.modes > std::min(height, width)) {
    throw ConfigError("global corrector: " + std::to_string(cfg.modes) + " modes exceed grid");
  }
  Rng rng(cfg.seed);
  const int in = 2 * kStateChannels + (cfg.coordinates ? 2 : 0);
  net_.add(std::make_unique<nn::Conv2d>("global.lift", in, cfg.width, 1, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    net_.add(std::make_unique<nn::FourierBlock>("global.block" + std::to_string(l), cfg.width,
                                                cfg.modes, rng));
  }
  net_.add(std::make_unique<nn::Conv2d>("global.proj1", cfg.width, cfg.projection, 1, rng));
  net_.add(std::make_unique<nn::Gelu>());
  net_.add(std::make_unique<nn::Conv2d>("global.proj2", cfg.projection, kVelocityChannels, 1, rng,
                                        nn::Init::Zero));
  if (cfg.coordinates) {
    coords_ = Tensor(2, height, width);
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        coords_.at(0, i, j) = std::sin(grid_coordinate(j, width));
        coords_.at(1, i, j) = std::sin(grid_coordinate(i, height));
      }
    }
  }
}

void GlobalCorrector::set_clip_bound(double c) {
  if (!(c > 0.0) || !std::isfinite(c)) throw NumericError("clip bound must be positive and finite");
  cfg_.clip_bound = c;
}

Tensor GlobalCorrector::input(const Tensor& x_t, const Tensor& x_hat) const {
  require_state_field(x_t, "global corrector x_t");
  require_state_field(x_hat, "global corrector x_hat");
  if (x_t.height() != height_ || x_t.width() != width_ || !x_t.same_shape(x_hat)) {
    throw GeometryError("global corrector: inputs do not match its " + std::to_string(height_) +
                        "x" + std::to_string(width_) + " grid");
  }
  const int extra = cfg_.coordinates ? 2 : 0;
  Tensor in(1, 2 * kStateChannels + extra, height_, width_);
  for (int c = 0; c < kStateChannels; ++c) {
    std::ranges::copy(x_t.plane(c), in.plane(0, c).begin());
    std::ranges::copy(x_hat.plane(c), in.plane(0, kStateChannels + c).begin());
  }
  for (int c = 0; c < extra; ++c) {
    std::ranges::copy(coords_.plane(c), in.plane(0, 2 * kStateChannels + c).begin());
  }
  return in;
}

Tensor GlobalCorrector::residual(const Tensor& x_t, const Tensor& x_hat, Cache* cache) const {
  Tensor raw = net_.forward(input(x_t, x_hat), cache ? &cache->net : nullptr);
  Tensor out = raw;
  const double c = cfg_.clip_bound;
  for (double& v : out.storage()) v = std::clamp(v, -c, c);
  if (cache) cache->raw = std::move(raw);
  return out;
}

Tensor GlobalCorrector::apply(const Tensor& x_t, const Tensor& x_hat) const {
  const Tensor r = residual(x_t, x_hat);
  Tensor x_g = x_hat;
  for (int c = 0; c < kVelocityChannels; ++c) {
    auto dst = x_g.plane(c);
    const auto src = r.plane(c);
    for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += src[p];
  }
  return x_g;
}

void GlobalCorrector::backward(const Tensor& d_residual, const Cache& cache, nn::Gradients* grads,
                               Tensor& d_x_t, Tensor& d_x_hat) const {
  require_same_shape(d_residual, cache.raw, "global corrector backward");
  Tensor d_raw = d_residual;
  const double c = cfg_.clip_bound;
  for (std::size_t i = 0; i < d_raw.size(); ++i) {
    if (std::abs(cache.raw.storage()[i]) > c) d_raw.storage()[i] = 0.0;
  }
  nn::Gradients scratch;
  if (!grads) scratch = nn::Gradients(net_.parameters());
  const Tensor d_in = net_.backward(d_raw, cache.net, grads ? *grads : scratch);
  for (int ch = 0; ch < kStateChannels; ++ch) {
    auto a = d_x_t.plane(ch);
    auto b = d_x_hat.plane(ch);
    const auto ga = d_in.plane(0, ch);
    const auto gb = d_in.plane(0, kStateChannels + ch);
    for (std::size_t p = 0; p < a.size(); ++p) {
      a[p] += ga[p];
      b[p] += gb[p];
    }
  }
}

// ---- LocalRefiner -----------------------------------------------------------

nlohmann::json LocalRefinerConfig::to_json() const {
  return {{"width", width}, {"depth", depth}, {"kernel", kernel},
          {"block", block}, {"halo", halo},   {"seed", seed}};
}

LocalRefinerConfig LocalRefinerConfig::from_json(const nlohmann::json& j) {
  LocalRefinerConfig c;
  c.width = json_get(j, "width", c.width);
  c.depth = json_get(j, "depth", c.depth);
  c.kernel = json_get(j, "kernel", c.kernel);
  c.block = json_get(j, "block", c.block);
  c.halo = json_get(j, "halo", c.halo);
  c.seed = json_get(j, "seed", c.seed);
  return c;
}

LocalRefiner::LocalRefiner(const LocalRefinerConfig& cfg) : cfg_(cfg) {
  if (cfg.depth < 2) throw ConfigError("local refiner depth must be >= 2");
  if (cfg.width < 1 || cfg.kernel < 1 || cfg.kernel % 2 == 0) {
    throw ConfigError("local refiner needs positive width and an odd kernel");
  }
  if (cfg.block < 2 || cfg.halo <= 0 || cfg.halo >= cfg.block) {
    throw GeometryError("local refiner geometry needs 0 < h < b");
  }
  Rng rng(cfg.seed);
  net_.add(std::make_unique<nn::Conv2d>("local.conv0", kWindowChannels, cfg.width, cfg.kernel, rng));
  net_.add(std::make_unique<nn::Gelu>());
  for (int l = 1; l + 1 < cfg.depth; ++l) {
    net_.add(std::make_unique<nn::Conv2d>("local.conv" + std::to_string(l), cfg.width, cfg.width,
                                          cfg.kernel, rng));
    net_.add(std::make_unique<nn::Gelu>());
  }
  net_.add(std::make_unique<nn::Conv2d>("local.head", cfg.width, kVelocityChannels, cfg.kernel,
                                        rng, nn::Init::Zero));
}

void LocalRefiner::require_windows(const Tensor& windows) const {
  const int s = window_side();
  if (windows.channels() != kWindowChannels || windows.height() != s || windows.width() != s) {
    throw GeometryError("local refiner trained for " + std::to_string(s) + "x" +
                        std::to_string(s) + " windows, got " + windows.shape_string());
  }
}

Tensor LocalRefiner::forward(const Tensor& windows, Cache* cache) const {
  require_windows(windows);
  const int n_win = windows.batch();
  Tensor out(n_win, kVelocityChannels, cfg_.block, cfg_.block);
  if (cache) cache->samples.assign(static_cast<std::size_t>(n_win), {});
  for (int n = 0; n < n_win; ++n) {
    const Tensor full =
        net_.forward(windows.sample(n), cache ? &cache->samples[static_cast<std::size_t>(n)] : nullptr);
    out.set_sample(n, center_crop(full, cfg_.halo));
  }
  return out;
}

Tensor LocalRefiner::backward(const Tensor& d_crop, const Cache& cache, nn::Gradients* grads) const {
  const int n_win = d_crop.batch();
  if (static_cast<std::size_t>(n_win) != cache.samples.size()) {
    throw DependencyError("local refiner backward without matching forward");
  }
  const int s = window_side(), b = cfg_.block, h = cfg_.halo;
  nn::Gradients scratch;
  if (!grads) scratch = nn::Gradients(net_.parameters());
  Tensor d_windows(n_win, kWindowChannels, s, s);
  for (int n = 0; n < n_win; ++n) {
    Tensor d_full(1, kVelocityChannels, s, s);
    for (int c = 0; c < kVelocityChannels; ++c) {
      for (int i = 0; i < b; ++i) {
        for (int j = 0; j < b; ++j) d_full.at(0, c, i + h, j + h) = d_crop.at(n, c, i, j);
      }
    }
    d_windows.set_sample(
        n, net_.backward(d_full, cache.samples[static_cast<std::size_t>(n)], grads ? *grads : scratch));
  }
  return d_windows;
}

Tensor extract_windows(const Tensor& x_t, const Tensor& x_g, const BlockPartition& p,
                       std::span<const int> blocks) {
  Tensor out(static_cast<int>(blocks.size()), kWindowChannels, p.window(), p.window());
  for (std::size_t n = 0; n < blocks.size(); ++n) {
    halo_extract_pair_into(x_t, x_g, p, blocks[n], out, static_cast<int>(n));
  }
  return out;
}

Tensor write_blocks(const Tensor& x_g, const BlockPartition& p, std::span<const int> blocks,
                    const Tensor& deltas, const HannWindow& win) {
  if (static_cast<std::size_t>(deltas.batch()) != blocks.size() && !blocks.empty()) {
    throw GeometryError("write_blocks: residual count does not match block count");
  }
  if (!deltas.all_finite()) throw NumericError("local refiner produced a non-finite residual");
  Tensor out = x_g;
  for (std::size_t n = 0; n < blocks.size(); ++n) {
    add_block_residual(out, p, blocks[n], deltas.sample(static_cast<int>(n)), win);
  }
  return out;
}

std::vector<int> all_blocks(const BlockPartition& p) {
  std::vector<int> out(static_cast<std::size_t>(p.count()));
  for (int b = 0; b < p.count(); ++b) out[static_cast<std::size_t>(b)] = b;
  return out;
}

double velocity_mse(const Tensor& pred, const Tensor& truth) {
  require_same_shape(pred, truth, "velocity_mse");
  double s = 0.0;
  for (int c = 0; c < kVelocityChannels; ++c) {
    const auto a = pred.plane(c);
    const auto b = truth.plane(c);
    for (std::size_t p = 0; p < a.size(); ++p) s += (a[p] - b[p]) * (a[p] - b[p]);
  }
  return s / (kVelocityChannels * static_cast<double>(pred.plane_size()));
}

PatchWeighting parse_patch_weighting(const std::string& s) {
  if (s == "uniform") return PatchWeighting::Uniform;
  if (s == "energy") return PatchWeighting::Energy;
  throw ConfigError("unknown patch weighting '" + s + "' (uniform|energy)");
}

std::string to_string(PatchWeighting w) { return w == PatchWeighting::Uniform ? "uniform" : "energy"; }

std::vector<double> energy_weights(std::span<const double> energies, double eps) {
  double peak = 0.0;
  for (double e : energies) peak = std::max(peak, e);
  std::vector<double> w(energies.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = energies[i] / (peak + eps);
  return w;
}

// ---- TrainConfig ------------------------------------------------------------

void TrainConfig::validate() const {
  if (ar_depth < 1) throw ConfigError("AR depth N must be >= 1");
  if (patience < 1 || patience_ar < 1) throw ConfigError("patience must be >= 1");
  if (t0_pool_global.empty() || t0_pool_patch.empty() || t0_pool_ar.empty()) {
    throw ConfigError("t0 pools must not be empty");
  }
  for (const auto* pool : {&t0_pool_global, &t0_pool_patch, &t0_pool_ar}) {
    for (int t : *pool) {
      if (t < 0) throw ConfigError("t0 values must be non-negative");
    }
  }
  if (epochs_global < 0 || epochs_ar < 0 || patch_steps < 0) throw ConfigError("negative budget");
  if (patch_batch < 1 || patch_eval_every < 1) throw ConfigError("patch batch/eval must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
  if (!(lr_global > 0.0 && lr_patch > 0.0 && lr_ar > 0.0)) throw ConfigError("learning rates must be positive");
  if (weight_decay < 0.0 || aux_weight < 0.0 || !(grad_clip > 0.0) || !(eps > 0.0)) {
    throw ConfigError("invalid regularization settings");
  }
  if (curriculum_epochs.size() != 2 || curriculum_epochs[0] > curriculum_epochs[1]) {
    throw ConfigError("curriculum_epochs needs two non-decreasing thresholds");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"ar_depth", ar_depth},
          {"t0_pool_global", t0_pool_global},
          {"epochs_global", epochs_global},
          {"lr_global", lr_global},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"patience", patience},
          {"validation_fraction", validation_fraction},
          {"t0_pool_patch", t0_pool_patch},
          {"patch_steps", patch_steps},
          {"patch_batch", patch_batch},
          {"lr_patch", lr_patch},
          {"patch_eval_every", patch_eval_every},
          {"patch_weighting", to_string(patch_weighting)},
          {"eps", eps},
          {"t0_pool_ar", t0_pool_ar},
          {"epochs_ar", epochs_ar},
          {"lr_ar", lr_ar},
          {"curriculum_epochs", curriculum_epochs},
          {"aux_weight", aux_weight},
          {"patience_ar", patience_ar},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.ar_depth = json_get(j, "ar_depth", c.ar_depth);
  c.t0_pool_global = json_get(j, "t0_pool_global", c.t0_pool_global);
  c.epochs_global = json_get(j, "epochs_global", c.epochs_global);
  c.lr_global = json_get(j, "lr_global", c.lr_global);
  c.weight_decay = json_get(j, "weight_decay", c.weight_decay);
  c.grad_clip = json_get(j, "grad_clip", c.grad_clip);
  c.patience = json_get(j, "patience", c.patience);
  c.validation_fraction = json_get(j, "validation_fraction", c.validation_fraction);
  c.t0_pool_patch = json_get(j, "t0_pool_patch", c.t0_pool_patch);
  c.patch_steps = json_get(j, "patch_steps", c.patch_steps);
  c.patch_batch = json_get(j, "patch_batch", c.patch_batch);
  c.lr_patch = json_get(j, "lr_patch", c.lr_patch);
  c.patch_eval_every = json_get(j, "patch_eval_every", c.patch_eval_every);
  if (j.contains("patch_weighting")) {
    c.patch_weighting = parse_patch_weighting(json_get<std::string>(j, "patch_weighting", "uniform"));
  }
  c.eps = json_get(j, "eps", c.eps);
  c.t0_pool_ar = json_get(j, "t0_pool_ar", c.t0_pool_ar);
  c.epochs_ar = json_get(j, "epochs_ar", c.epochs_ar);
  c.lr_ar = json_get(j, "lr_ar", c.lr_ar);
  c.curriculum_epochs = json_get(j, "curriculum_epochs", c.curriculum_epochs);
  c.aux_weight = json_get(j, "aux_weight", c.aux_weight);
  c.patience_ar = json_get(j, "patience_ar", c.patience_ar);
  c.seed = json_get(j, "seed", c.seed);
  c.validate();
  return c;
}

int curriculum_depth(const TrainConfig& cfg, int epoch) {
  if (epoch < cfg.curriculum_epochs[0]) return std::min(1, cfg.ar_depth);
  if (epoch < cfg.curriculum_epochs[1]) return std::min(2, cfg.ar_depth);
  return cfg.ar_depth;
}

std::pair<std::vector<int>, std::vector<int>> validation_split(int n, double fraction) {
  if (n < 2) throw ConfigError("need at least two training trajectories to hold out validation");
  const int n_val = std::clamp(static_cast<int>(std::ceil(fraction * n)), 1, n - 1);
  std::vector<int> train, val;
  for (int i = 0; i < n; ++i) (i < n - n_val ? train : val).push_back(i);
  return {train, val};
}

double clip_calibration(std::span<const Trajectory> data, const SurrogateHost& host,
                        std::span<const int> t0_pool, double percentile) {
  std::vector<double> maxima;
  for (const auto& traj : data) {
    for (int t0 : t0_pool) {
      if (t0 + 1 >= traj.length()) continue;
      const Tensor x_hat = host.forecast(traj.frames[static_cast<std::size_t>(t0)]);
      const Tensor& truth = traj.frames[static_cast<std::size_t>(t0) + 1];
      double m = 0.0;
      for (int c = 0; c < kVelocityChannels; ++c) {
        const auto a = truth.plane(c);
        const auto b = x_hat.plane(c);
        for (std::size_t p = 0; p < a.size(); ++p) m = std::max(m, std::abs(a[p] - b[p]));
      }
      maxima.push_back(m);
    }
  }
  if (maxima.empty()) throw NumericError("clip calibration: empty calibration set");
  if (maxima.size() < 10) {
    throw ConfigError("clip calibration needs at least 10 samples, got " +
                      std::to_string(maxima.size()));
  }
  return nearest_rank_percentile(std::move(maxima), percentile);
}

// ---- AR unroll --------------------------------------------------------------

double ar_unroll_loss(const SurrogateHost& host, const GlobalCorrector& global,
                      const LocalRefiner* local, const BlockPartition* partition,
                      const HannWindow* window, const Tensor& z0, std::span<const Tensor> truths,
                      double aux_weight, UnrollGrads grads) {
  if (local && (!partition || !window)) {
    throw ConfigError("hybrid unroll needs a partition and a window");
  }
  if (local && (partition->block != local->config().block || partition->halo != local->config().halo)) {
    throw GeometryError("partition does not match the refiner's training geometry");
  }
  const bool need_grad = grads.global != nullptr || grads.local != nullptr;
  const auto blocks = local ? all_blocks(*partition) : std::vector<int>{};

  struct Record {
    SurrogateHost::Tape host;
    GlobalCorrector::Cache global;
    LocalRefiner::Cache local;
    Tensor deltas;
    Tensor out;
  };
  std::vector<Record> rec(need_grad ? truths.size() : 0);

  Tensor z = z0;
  double loss = 0.0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    Record* r = need_grad ? &rec[i] : nullptr;
    const Tensor x_hat = r ? host.forecast_taped(z, r->host) : host.forecast(z);
    const Tensor res = global.residual(z, x_hat, r ? &r->global : nullptr);
    Tensor x_g = x_hat;
    for (int c = 0; c < kVelocityChannels; ++c) {
      auto dst = x_g.plane(c);
      const auto src = res.plane(c);
      for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += src[p];
    }
    Tensor out;
    if (local) {
      Tensor deltas = local->forward(extract_windows(z, x_g, *partition, blocks), r ? &r->local : nullptr);
      out = write_blocks(x_g, *partition, blocks, deltas, *window);
      loss += aux_weight * squared_norm(deltas) / static_cast<double>(deltas.size());
      if (r) r->deltas = std::move(deltas);
    } else {
      out = std::move(x_g);
    }
    loss += velocity_mse(out, truths[i]);
    if (!out.all_finite()) throw NumericError("non-finite state during AR unroll");
    if (r) r->out = out;
    z = std::move(out);
  }
  if (!need_grad) return loss;

  const double mse_scale = 2.0 / (kVelocityChannels * static_cast<double>(z0.plane_size()));
  Tensor d_next = zeros_like(z0);
  for (std::size_t step = truths.size(); step-- > 0;) {
    Record& r = rec[step];
    Tensor d_out = d_next;
    for (int c = 0; c < kVelocityChannels; ++c) {
      auto d = d_out.plane(c);
      const auto o = r.out.plane(c);
      const auto t = truths[step].plane(c);
      for (std::size_t p = 0; p < d.size(); ++p) d[p] += mse_scale * (o[p] - t[p]);
    }
    const Tensor& z_in = step == 0 ? z0 : rec[step - 1].out;
    Tensor d_z = zeros_like(z0);
    Tensor d_xg = d_out;
    if (local) {
      const int b = partition->block;
      Tensor d_deltas = zeros_like(r.deltas);
      const double aux_scale = 2.0 * aux_weight / static_cast<double>(r.deltas.size());
      for (std::size_t n = 0; n < blocks.size(); ++n) {
        const auto o = partition->origin(blocks[n]);
        const int ni = static_cast<int>(n);
        for (int c = 0; c < kVelocityChannels; ++c) {
          for (int i = 0; i < b; ++i) {
            for (int j = 0; j < b; ++j) {
              d_deltas.at(ni, c, i, j) = window->at(i, j) * d_out.at(c, o.row + i, o.col + j) +
                                         aux_scale * r.deltas.at(ni, c, i, j);
            }
          }
        }
      }
      const Tensor d_windows = local->backward(d_deltas, r.local, grads.local);
      for (std::size_t n = 0; n < blocks.size(); ++n) {
        halo_scatter_pair_add(d_windows, static_cast<int>(n), *partition, blocks[n], d_z, d_xg);
      }
    }
    Tensor d_xhat = d_xg;
    global.backward(project_uv(d_xg), r.global, grads.global, d_z, d_xhat);
    axpy(d_z, host.vjp(r.host, d_xhat));
    (void)z_in;
    d_next = std::move(d_z);
  }
  return loss;
}

// ---- global stage -----------------------------------------------------------

double global_validation_loss(const GlobalCorrector& global, std::span<const Trajectory> data,
                              std::span<const int> indices, const SurrogateHost& host,
                              const TrainConfig& cfg) {
  double total = 0.0;
  int count = 0;
  for (int idx : indices) {
    const auto& traj = data[static_cast<std::size_t>(idx)];
    for (int t0 : cfg.t0_pool_global) {
      total += ar_unroll_loss(host, global, nullptr, nullptr, nullptr,
                              traj.frames[static_cast<std::size_t>(t0)],
                              truth_window(traj, t0, cfg.ar_depth), 0.0);
      ++count;
    }
  }
  if (count == 0) throw NumericError("empty validation set");
  return total / count;
}

StageResult train_global(GlobalCorrector& global, std::span<const Trajectory> train,
                         const SurrogateHost& host, const TrainConfig& cfg,
                         const StageControl& control) {
  cfg.validate();
  const auto [tr, val] = validation_split(static_cast<int>(train.size()), cfg.validation_fraction);
  std::vector<int> all(tr);
  all.insert(all.end(), val.begin(), val.end());
  require_length(train, all, cfg.t0_pool_global, cfg.ar_depth, "train_global");

  auto params = global.parameters();
  const nn::ConstParameterList cparams(params.begin(), params.end());
  nn::AdamW opt(cparams, {cfg.lr_global, 0.9, 0.999, 1e-8, cfg.weight_decay});
  LoopState s;
  if (!load_loop_state(control.state_dir, s, params, opt)) {
    s.initial_val = global_validation_loss(global, train, val, host, cfg);
    s.best_val = s.initial_val;
    s.best = nn::snapshot(cparams);
    emit(control, {{"stage", "global"}, {"epoch", -1}, {"val_loss", s.initial_val}});
  }

  StageResult result;
  result.initial_validation = s.initial_val;
  const long total_steps = static_cast<long>(cfg.epochs_global) * static_cast<long>(tr.size());
  int ran = 0;
  nn::Gradients grads(cparams);
  while (!s.finished && s.next < cfg.epochs_global) {
    const int epoch = s.next;
    Rng rng(derive_seed(cfg.seed, 0x100000 + static_cast<std::uint64_t>(epoch)));
    const auto order = shuffled(tr, rng);
    double loss_sum = 0.0, norm_sum = 0.0, lr = cfg.lr_global;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto& traj = train[static_cast<std::size_t>(order[k])];
      const int t0 = cfg.t0_pool_global[rng.below(cfg.t0_pool_global.size())];
      lr = cosine_lr(cfg.lr_global, static_cast<long>(epoch) * static_cast<long>(tr.size()) +
                                        static_cast<long>(k), total_steps);
      grads.zero();
      loss_sum += ar_unroll_loss(host, global, nullptr, nullptr, nullptr,
                                 traj.frames[static_cast<std::size_t>(t0)],
                                 truth_window(traj, t0, cfg.ar_depth), 0.0, {&grads, nullptr});
      if (!grads.all_finite()) throw NumericError("non-finite gradient in global training");
      norm_sum += grads.norm();
      nn::clip_grad_norm(grads, cfg.grad_clip);
      opt.step(params, grads, lr);
    }
    const double v = global_validation_loss(global, train, val, host, cfg);
    if (v < s.best_val) {
      s.best_val = v;
      s.best = nn::snapshot(cparams);
      s.bad = 0;
    } else {
      ++s.bad;
    }
    emit(control, {{"stage", "global"},
                   {"epoch", epoch},
                   {"train_loss", loss_sum / static_cast<double>(order.size())},
                   {"val_loss", v},
                   {"lr", lr},
                   {"grad_norm", norm_sum / static_cast<double>(order.size())}});
    s.next = epoch + 1;
    if (s.bad >= cfg.patience || s.next >= cfg.epochs_global) s.finished = true;
    if (!control.state_dir.empty()) save_loop_state(control.state_dir, s, cparams, opt);
    ++ran;
    if (!s.finished && control.stop_after >= 0 && ran >= control.stop_after) {
      result.completed = false;
      result.epochs_run = s.next;
      result.best_validation = s.best_val;
      return result;
    }
  }
  nn::restore(params, s.best);
  result.epochs_run = s.next;
  result.best_validation = s.best_val;
  return result;
}

// ---- patch stage ------------------------------------------------------------

PatchSample make_patch_sample(const Trajectory& traj, int t0, const SurrogateHost& host,
                              const GlobalCorrector& global, const BlockPartition& p,
                              PatchWeighting weighting, double eps) {
  const Tensor& z = traj.frames.at(static_cast<std::size_t>(t0));
  const Tensor& truth = traj.frames.at(static_cast<std::size_t>(t0) + 1);
  const Tensor x_g = global.apply(z, host.forecast(z));
  const auto blocks = all_blocks(p);
  PatchSample out;
  out.windows = extract_windows(z, x_g, p, blocks);
  out.targets = Tensor(p.count(), kVelocityChannels, p.block, p.block);
  std::vector<double> energy(static_cast<std::size_t>(p.count()), 0.0);
  for (int b = 0; b < p.count(); ++b) {
    const auto o = p.origin(b);
    for (int c = 0; c < kVelocityChannels; ++c) {
      for (int i = 0; i < p.block; ++i) {
        for (int j = 0; j < p.block; ++j) {
          const double r = truth.at(c, o.row + i, o.col + j) - x_g.at(c, o.row + i, o.col + j);
          out.targets.at(b, c, i, j) = r;
          energy[static_cast<std::size_t>(b)] += r * r;
        }
      }
    }
  }
  out.weights = weighting == PatchWeighting::Energy
                    ? energy_weights(energy, eps)
                    : std::vector<double>(static_cast<std::size_t>(p.count()), 1.0);
  return out;
}

double patch_loss(const LocalRefiner& local, const Tensor& windows, const Tensor& targets,
                  std::span<const double> weights, nn::Gradients* grads) {
  if (static_cast<std::size_t>(targets.batch()) != weights.size() || windows.batch() != targets.batch()) {
    throw GeometryError("patch_loss: batch sizes disagree");
  }
  LocalRefiner::Cache cache;
  const Tensor deltas = local.forward(windows, grads ? &cache : nullptr);
  require_same_shape(deltas, targets, "patch_loss");
  const std::size_t per = deltas.size() / static_cast<std::size_t>(deltas.batch());
  const double norm = 1.0 / (static_cast<double>(deltas.batch()) * static_cast<double>(per));
  double loss = 0.0;
  Tensor d = zeros_like(deltas);
  for (int n = 0; n < deltas.batch(); ++n) {
    const double w = weights[static_cast<std::size_t>(n)];
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t idx = static_cast<std::size_t>(n) * per + k;
      const double r = targets.storage()[idx] - deltas.storage()[idx];
      loss += w * r * r;
      d.storage()[idx] = -2.0 * w * r * norm;
    }
  }
  if (grads) local.backward(d, cache, grads);
  return loss * norm;
}

namespace {

struct PatchPool {
  std::vector<PatchSample> samples;
  std::size_t patches = 0;
};

PatchPool build_pool(std::span<const Trajectory> data, std::span<const int> indices,
                     const SurrogateHost& host, const GlobalCorrector& global,
                     const BlockPartition& p, const TrainConfig& cfg) {
  PatchPool pool;
  for (int idx : indices) {
    for (int t0 : cfg.t0_pool_patch) {
      pool.samples.push_back(make_patch_sample(data[static_cast<std::size_t>(idx)], t0, host, global,
                                               p, cfg.patch_weighting, cfg.eps));
      pool.patches += static_cast<std::size_t>(p.count());
    }
  }
  return pool;
}

double pool_loss(const LocalRefiner& local, const PatchPool& pool) {
  double total = 0.0;
  for (const auto& s : pool.samples) total += patch_loss(local, s.windows, s.targets, s.weights, nullptr);
  return total / static_cast<double>(pool.samples.size());
}

BlockPartition refiner_partition(const LocalRefiner& local, const Trajectory& traj) {
  const Tensor& f = traj.frames.front();
  return make_partition(f.height(), f.width(), local.config().block, local.config().halo);
}

}  // namespace

StageResult train_local_patch(LocalRefiner& local, std::span<const Trajectory> train,
                              const SurrogateHost& host, const GlobalCorrector& global,
                              const TrainConfig& cfg, const StageControl& control) {
  cfg.validate();
  const auto [tr, val] = validation_split(static_cast<int>(train.size()), cfg.validation_fraction);
  std::vector<int> all(tr);
  all.insert(all.end(), val.begin(), val.end());
  require_length(train, all, cfg.t0_pool_patch, 1, "train_local_patch");
  const BlockPartition p = refiner_partition(local, train.front());
  const PatchPool train_pool = build_pool(train, tr, host, global, p, cfg);
  const PatchPool val_pool = build_pool(train, val, host, global, p, cfg);

  auto params = local.parameters();
  const nn::ConstParameterList cparams(params.begin(), params.end());
  nn::AdamW opt(cparams, {cfg.lr_patch, 0.9, 0.999, 1e-8, 0.0});
  LoopState s;
  if (!load_loop_state(control.state_dir, s, params, opt)) {
    s.initial_val = pool_loss(local, val_pool);
    s.best_val = s.initial_val;
    s.best = nn::snapshot(cparams);
    emit(control, {{"stage", "local-patch"}, {"step", 0}, {"val_loss", s.initial_val}});
  }
  StageResult result;
  result.initial_validation = s.initial_val;
  const int intervals = (cfg.patch_steps + cfg.patch_eval_every - 1) / cfg.patch_eval_every;
  const int per_sample = p.count();
  nn::Gradients grads(cparams);
  int ran = 0;
  while (!s.finished && s.next < intervals) {
    const int first = s.next * cfg.patch_eval_every;
    const int last = std::min(cfg.patch_steps, first + cfg.patch_eval_every);
    double loss_sum = 0.0, norm_sum = 0.0;
    for (int step = first; step < last; ++step) {
      Rng rng(derive_seed(cfg.seed, 0x200000 + static_cast<std::uint64_t>(step)));
      Tensor windows(cfg.patch_batch, kWindowChannels, p.window(), p.window());
      Tensor targets(cfg.patch_batch, kVelocityChannels, p.block, p.block);
      std::vector<double> weights(static_cast<std::size_t>(cfg.patch_batch));
      for (int n = 0; n < cfg.patch_batch; ++n) {
        const auto pick = rng.below(train_pool.patches);
        const auto& sample = train_pool.samples[pick / static_cast<std::size_t>(per_sample)];
        const int b = static_cast<int>(pick % static_cast<std::size_t>(per_sample));
        windows.set_sample(n, sample.windows.sample(b));
        targets.set_sample(n, sample.targets.sample(b));
        weights[static_cast<std::size_t>(n)] = sample.weights[static_cast<std::size_t>(b)];
      }
      grads.zero();
      loss_sum += patch_loss(local, windows, targets, weights, &grads);
      if (!grads.all_finite()) throw NumericError("non-finite gradient in patch training");
      norm_sum += grads.norm();
      opt.step(params, grads, cfg.lr_patch);
    }
    const double v = pool_loss(local, val_pool);
    if (v < s.best_val) {
      s.best_val = v;
      s.best = nn::snapshot(cparams);
      s.bad = 0;
    } else {
      ++s.bad;
    }
    const int n_steps = last - first;
    emit(control, {{"stage", "local-patch"},
                   {"step", last},
                   {"train_loss", loss_sum / n_steps},
                   {"val_loss", v},
                   {"lr", cfg.lr_patch},
                   {"grad_norm", norm_sum / n_steps}});
    s.next += 1;
    if (s.next >= intervals) s.finished = true;
    if (!control.state_dir.empty()) save_loop_state(control.state_dir, s, cparams, opt);
    ++ran;
    if (!s.finished && control.stop_after >= 0 && ran >= control.stop_after) {
      result.completed = false;
      result.epochs_run = s.next;
      result.best_validation = s.best_val;
      return result;
    }
  }
  nn::restore(params, s.best);
  result.epochs_run = s.next;
  result.best_validation = s.best_val;
  return result;
}

// ---- hybrid AR stage --------------------------------------------------------

double hybrid_validation_loss(const LocalRefiner& local, std::span<const Trajectory> data,
                              std::span<const int> indices, const SurrogateHost& host,
                              const GlobalCorrector& global, const TrainConfig& cfg) {
  const BlockPartition p = refiner_partition(local, data.front());
  const HannWindow win = hann_window(p.block);
  double total = 0.0;
  int count = 0;
  for (int idx : indices) {
    const auto& traj = data[static_cast<std::size_t>(idx)];
    for (int t0 : cfg.t0_pool_ar) {
      total += ar_unroll_loss(host, global, &local, &p, &win, traj.frames[static_cast<std::size_t>(t0)],
                              truth_window(traj, t0, cfg.ar_depth), 0.0);
      ++count;
    }
  }
  if (count == 0) throw NumericError("empty validation set");
  return total / count;
}

StageResult train_local_ar(LocalRefiner& local, std::span<const Trajectory> train,
                           const SurrogateHost& host, const GlobalCorrector& global,
                           const TrainConfig& cfg, const StageControl& control) {
  cfg.validate();
  const auto [tr, val] = validation_split(static_cast<int>(train.size()), cfg.validation_fraction);
  std::vector<int> all(tr);
  all.insert(all.end(), val.begin(), val.end());
  require_length(train, all, cfg.t0_pool_ar, cfg.ar_depth, "train_local_ar");
  const BlockPartition p = refiner_partition(local, train.front());
  const HannWindow win = hann_window(p.block);

  auto params = local.parameters();
  const nn::ConstParameterList cparams(params.begin(), params.end());
  nn::AdamW opt(cparams, {cfg.lr_ar, 0.9, 0.999, 1e-8, cfg.weight_decay});
  LoopState s;
  if (!load_loop_state(control.state_dir, s, params, opt)) {
    s.initial_val = hybrid_validation_loss(local, train, val, host, global, cfg);
    s.best_val = s.initial_val;
    s.best = nn::snapshot(cparams);
    emit(control, {{"stage", "local-ar"}, {"epoch", -1}, {"val_loss", s.initial_val}});
  }
  StageResult result;
  result.initial_validation = s.initial_val;
  nn::Gradients grads(cparams);
  int ran = 0;
  while (!s.finished && s.next < cfg.epochs_ar) {
    const int epoch = s.next;
    const int depth = curriculum_depth(cfg, epoch);
    Rng rng(derive_seed(cfg.seed, 0x300000 + static_cast<std::uint64_t>(epoch)));
    const auto order = shuffled(tr, rng);
    double loss_sum = 0.0, norm_sum = 0.0;
    for (int idx : order) {
      const auto& traj = train[static_cast<std::size_t>(idx)];
      const int t0 = cfg.t0_pool_ar[rng.below(cfg.t0_pool_ar.size())];
      grads.zero();
      loss_sum += ar_unroll_loss(host, global, &local, &p, &win, traj.frames[static_cast<std::size_t>(t0)],
                                 truth_window(traj, t0, depth), cfg.aux_weight, {nullptr, &grads});
      if (!grads.all_finite()) throw NumericError("non-finite gradient in hybrid training");
      norm_sum += grads.norm();
      nn::clip_grad_norm(grads, cfg.grad_clip);
      opt.step(params, grads, cfg.lr_ar);
    }
    const double v = hybrid_validation_loss(local, train, val, host, global, cfg);
    if (v < s.best_val) {
      s.best_val = v;
      s.best = nn::snapshot(cparams);
      s.bad = 0;
    } else {
      ++s.bad;
    }
    emit(control, {{"stage", "local-ar"},
                   {"epoch", epoch},
                   {"depth", depth},
                   {"train_loss", loss_sum / static_cast<double>(order.size())},
                   {"val_loss", v},
                   {"lr", cfg.lr_ar},
                   {"grad_norm", norm_sum / static_cast<double>(order.size())}});
    s.next = epoch + 1;
    if (s.bad >= cfg.patience_ar || s.next >= cfg.epochs_ar) s.finished = true;
    if (!control.state_dir.empty()) save_loop_state(control.state_dir, s, cparams, opt);
    ++ran;
    if (!s.finished && control.stop_after >= 0 && ran >= control.stop_after) {
      result.completed = false;
      result.epochs_run = s.next;
      result.best_validation = s.best_val;
      return result;
    }
  }
  nn::restore(params, s.best);
  result.epochs_run = s.next;
  result.best_validation = s.best_val;
  return result;
}

}  // namespace haloroute
