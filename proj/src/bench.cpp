#include "haloroute/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "haloroute/fields.hpp"
#include "haloroute/hash.hpp"
#include "haloroute/rng.hpp"

namespace haloroute {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Spectrum to_spectrum(std::span<const double> f, const SpectralGrid& g) {
  return fft2(f, g.height(), g.width());
}

std::vector<double> to_real(Spectrum s, const SpectralGrid& g) {
  std::vector<double> out(g.size());
  ifft2_real(std::move(s), g.height(), g.width(), out);
  return out;
}

double max_speed(std::span<const double> u, std::span<const double> v) {
  double m = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) m = std::max(m, std::hypot(u[i], v[i]));
  return m;
}

}  // namespace

std::string to_string(IcFamily f) {
  switch (f) {
    case IcFamily::Gaussian: return "gaussian";
    case IcFamily::Sines: return "sines";
    case IcFamily::Shear: return "shear";
    case IcFamily::Piecewise: return "piecewise";
  }
  return "unknown";
}

IcFamily parse_ic_family(const std::string& tag) {
  if (tag == "gaussian") return IcFamily::Gaussian;
  if (tag == "sines") return IcFamily::Sines;
  if (tag == "shear") return IcFamily::Shear;
  if (tag == "piecewise") return IcFamily::Piecewise;
  throw ConfigError("unknown initial-condition family '" + tag + "'");
}

void validate(const SolverConfig& cfg) {
  if (cfg.height < 8 || cfg.width < 8) throw ConfigError("solver grid must be at least 8x8");
  if (!(cfg.nu > 0.0)) throw ConfigError("viscosity must be positive");
  if (!(cfg.dt > 0.0)) throw ConfigError("time step must be positive");
  if (cfg.steps_per_frame < 1) throw ConfigError("steps_per_frame must be >= 1");
  if (!(cfg.velocity_scale > 0.0)) throw ConfigError("velocity_scale must be positive");
}

VorticitySolver::VorticitySolver(const SolverConfig& cfg)
    : cfg_(cfg), grid_(cfg.height, cfg.width) {
  validate(cfg);
  const std::size_t n = grid_.size();
  const double cutoff = 2.0 / 3.0 * grid_.kmax();
  dealias_.resize(n);
  inv_k2_.resize(n);
  ef_half_.resize(n);
  ef_full_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    dealias_[i] = grid_.kmag()[i] <= cutoff + 1e-12 ? 1.0 : 0.0;
    inv_k2_[i] = grid_.k2()[i] > 0.0 ? 1.0 / grid_.k2()[i] : 0.0;
    ef_half_[i] = std::exp(-cfg.nu * grid_.k2()[i] * cfg.dt * 0.5);
    ef_full_[i] = ef_half_[i] * ef_half_[i];
  }
  if (cfg.forcing_amplitude != 0.0) {
    std::vector<double> f(n);
    for (int i = 0; i < cfg.height; ++i) {
      const double y = grid_coordinate(i, cfg.height);
      for (int j = 0; j < cfg.width; ++j) {
        f[static_cast<std::size_t>(i) * cfg.width + j] =
            cfg.forcing_amplitude * std::sin(cfg.forcing_wavenumber * y);
      }
    }
    forcing_hat_ = to_spectrum(f, grid_);
    for (std::size_t i = 0; i < n; ++i) forcing_hat_[i] *= dealias_[i];
  }
}

VelocityFields VorticitySolver::velocity(std::span<const double> omega) const {
  Spectrum w = to_spectrum(omega, grid_);
  Spectrum psi(w.size()), u(w.size()), v(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    psi[i] = w[i] * inv_k2_[i];
    u[i] = grid_.ddy()[i] * psi[i];
    v[i] = -grid_.ddx()[i] * psi[i];
  }
  return {to_real(std::move(u), grid_), to_real(std::move(v), grid_),
          to_real(std::move(psi), grid_)};
}

std::vector<double> VorticitySolver::curl(std::span<const double> u,
                                          std::span<const double> v) const {
  Spectrum uh = to_spectrum(u, grid_);
  Spectrum vh = to_spectrum(v, grid_);
  for (std::size_t i = 0; i < uh.size(); ++i) {
    vh[i] = grid_.ddx()[i] * vh[i] - grid_.ddy()[i] * uh[i];
  }
  return to_real(std::move(vh), grid_);
}

Tensor VorticitySolver::state_from_vorticity(std::span<const double> omega) const {
  auto vel = velocity(omega);
  Tensor out(kStateChannels, cfg_.height, cfg_.width);
  std::ranges::copy(vel.u, out.plane(0).begin());
  std::ranges::copy(vel.v, out.plane(1).begin());
  std::ranges::copy(vel.psi, out.plane(2).begin());
  std::ranges::copy(omega, out.plane(3).begin());
  return out;
}

double VorticitySolver::cfl_number(std::span<const double> omega) const {
  auto vel = velocity(omega);
  const double dx = kTwoPi / std::max(cfg_.height, cfg_.width);
  return cfg_.dt * max_speed(vel.u, vel.v) / dx;
}

Spectrum VorticitySolver::nonlinear(const Spectrum& w_hat, StageTape* tape) const {
  const std::size_t n = w_hat.size();
  Spectrum u(n), v(n), wx(n), wy(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Complex psi = w_hat[i] * inv_k2_[i];
    u[i] = grid_.ddy()[i] * psi;
    v[i] = -grid_.ddx()[i] * psi;
    wx[i] = grid_.ddx()[i] * w_hat[i];
    wy[i] = grid_.ddy()[i] * w_hat[i];
  }
  StageTape local;
  StageTape& t = tape ? *tape : local;
  t.u = to_real(std::move(u), grid_);
  t.v = to_real(std::move(v), grid_);
  t.wx = to_real(std::move(wx), grid_);
  t.wy = to_real(std::move(wy), grid_);
  std::vector<double> prod(n);
  for (std::size_t i = 0; i < n; ++i) prod[i] = t.u[i] * t.wx[i] + t.v[i] * t.wy[i];
  Spectrum out = to_spectrum(prod, grid_);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] *= -dealias_[i];
    if (!forcing_hat_.empty()) out[i] += forcing_hat_[i];
  }
  return out;
}

Spectrum VorticitySolver::nonlinear_adjoint(const StageTape& t, const Spectrum& g_hat) const {
  const std::size_t n = g_hat.size();
  Spectrum q_hat(n);
  for (std::size_t i = 0; i < n; ++i) q_hat[i] = -dealias_[i] * g_hat[i];
  const auto q = to_real(std::move(q_hat), grid_);
  std::vector<double> a(n), b(n), c(n), d(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = t.wy[i] * q[i];
    b[i] = t.wx[i] * q[i];
    c[i] = t.u[i] * q[i];
    d[i] = t.v[i] * q[i];
  }
  const Spectrum ah = to_spectrum(a, grid_);
  const Spectrum bh = to_spectrum(b, grid_);
  const Spectrum ch = to_spectrum(c, grid_);
  const Spectrum dh = to_spectrum(d, grid_);
  Spectrum out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Complex kx = grid_.ddx()[i];
    const Complex ky = grid_.ddy()[i];
    out[i] = inv_k2_[i] * (kx * ah[i] - ky * bh[i]) - kx * ch[i] - ky * dh[i];
  }
  return out;
}

std::vector<double> VorticitySolver::step_impl(std::span<const double> omega,
                                               StepTape* tape) const {
  if (omega.size() != grid_.size()) throw GeometryError("ns_step: vorticity size mismatch");
  const double dt = cfg_.dt;
  const std::size_t n = grid_.size();
  const Spectrum a = to_spectrum(omega, grid_);

  StageTape first;
  const Spectrum k1 = nonlinear(a, tape ? &tape->stage[0] : &first);
  const StageTape& s0 = tape ? tape->stage[0] : first;
  const double dx = kTwoPi / std::max(cfg_.height, cfg_.width);
  const double cfl = dt * max_speed(s0.u, s0.v) / dx;
  if (!(cfl < 0.5)) {
    throw NumericError("CFL violation: dt*max|u|/dx = " + std::to_string(cfl) + " >= 0.5");
  }

  Spectrum stage(n);
  for (std::size_t i = 0; i < n; ++i) stage[i] = ef_half_[i] * (a[i] + 0.5 * dt * k1[i]);
  const Spectrum k2 = nonlinear(stage, tape ? &tape->stage[1] : nullptr);
  for (std::size_t i = 0; i < n; ++i) stage[i] = ef_half_[i] * a[i] + 0.5 * dt * k2[i];
  const Spectrum k3 = nonlinear(stage, tape ? &tape->stage[2] : nullptr);
  for (std::size_t i = 0; i < n; ++i) stage[i] = ef_full_[i] * a[i] + dt * ef_half_[i] * k3[i];
  const Spectrum k4 = nonlinear(stage, tape ? &tape->stage[3] : nullptr);

  Spectrum out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = dealias_[i] *
             (ef_full_[i] * a[i] +
              dt / 6.0 * (ef_full_[i] * k1[i] + 2.0 * ef_half_[i] * (k2[i] + k3[i]) + k4[i]));
  }
  return to_real(std::move(out), grid_);
}

std::vector<double> VorticitySolver::step(std::span<const double> omega) const {
  return step_impl(omega, nullptr);
}

std::vector<double> VorticitySolver::step_taped(std::span<const double> omega,
                                                StepTape& tape) const {
  return step_impl(omega, &tape);
}

std::vector<double> VorticitySolver::step_adjoint(const StepTape& tape,
                                                  std::span<const double> grad_out) const {
  const double dt = cfg_.dt;
  const std::size_t n = grid_.size();
  Spectrum g = to_spectrum(grad_out, grid_);
  for (std::size_t i = 0; i < n; ++i) g[i] *= dealias_[i];

  Spectrum ga(n), gk1(n), gk2(n), gk3(n), gk4(n);
  for (std::size_t i = 0; i < n; ++i) {
    ga[i] = ef_full_[i] * g[i];
    gk1[i] = dt / 6.0 * ef_full_[i] * g[i];
    gk2[i] = dt / 3.0 * ef_half_[i] * g[i];
    gk3[i] = gk2[i];
    gk4[i] = dt / 6.0 * g[i];
  }
  const Spectrum ga4 = nonlinear_adjoint(tape.stage[3], gk4);
  for (std::size_t i = 0; i < n; ++i) {
    ga[i] += ef_full_[i] * ga4[i];
    gk3[i] += dt * ef_half_[i] * ga4[i];
  }
  const Spectrum ga3 = nonlinear_adjoint(tape.stage[2], gk3);
  for (std::size_t i = 0; i < n; ++i) {
    ga[i] += ef_half_[i] * ga3[i];
    gk2[i] += 0.5 * dt * ga3[i];
  }
  const Spectrum ga2 = nonlinear_adjoint(tape.stage[1], gk2);
  for (std::size_t i = 0; i < n; ++i) {
    ga[i] += ef_half_[i] * ga2[i];
    gk1[i] += 0.5 * dt * ef_half_[i] * ga2[i];
  }
  const Spectrum ga1 = nonlinear_adjoint(tape.stage[0], gk1);
  for (std::size_t i = 0; i < n; ++i) ga[i] += ga1[i];
  return to_real(std::move(ga), grid_);
}

std::vector<double> ns_step(std::span<const double> omega, const SolverConfig& cfg) {
  return VorticitySolver(cfg).step(omega);
}

std::vector<double> initial_vorticity(const SolverConfig& cfg, std::uint64_t seed) {
  VorticitySolver solver(cfg);
  const int H = cfg.height;
  const int W = cfg.width;
  const std::size_t n = static_cast<std::size_t>(H) * W;
  Rng rng(seed);
  std::vector<double> omega(n, 0.0);
  auto at = [&](int i, int j) -> double& { return omega[static_cast<std::size_t>(i) * W + j]; };
  // Minimal periodic displacement on [-pi, pi).
  auto pdist = [](double d) { return std::remainder(d, kTwoPi); };

  switch (cfg.family) {
    case IcFamily::Gaussian: {
      const int blobs = 4 + static_cast<int>(rng.below(5));
      for (int b = 0; b < blobs; ++b) {
        const double cx = rng.uniform(0.0, kTwoPi);
        const double cy = rng.uniform(0.0, kTwoPi);
        const double sigma = rng.uniform(0.3, 0.6);
        const double amp = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(1.0, 3.0);
        for (int i = 0; i < H; ++i) {
          const double dy = pdist(grid_coordinate(i, H) - cy);
          for (int j = 0; j < W; ++j) {
            const double dx = pdist(grid_coordinate(j, W) - cx);
            at(i, j) += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          }
        }
      }
      break;
    }
    case IcFamily::Sines: {
      for (int ky = -4; ky <= 4; ++ky) {
        for (int kx = 0; kx <= 4; ++kx) {
          if ((kx == 0 && ky <= 0) || kx * kx + ky * ky > 16) continue;
          const double amp = rng.normal() / std::hypot(kx, ky);
          const double phase = rng.uniform(0.0, kTwoPi);
          for (int i = 0; i < H; ++i) {
            const double y = grid_coordinate(i, H);
            for (int j = 0; j < W; ++j) {
              at(i, j) += amp * std::cos(kx * grid_coordinate(j, W) + ky * y + phase);
            }
          }
        }
      }
      break;
    }
    case IcFamily::Shear: {
      // Two opposing strips: u > 0 on one half-period in y, u < 0 on the other.
      const double y0 = rng.uniform(-0.5, 0.5);
      const double delta = rng.uniform(0.15, 0.3);
      double amp[3], phase[3];
      for (int m = 0; m < 3; ++m) {
        amp[m] = 0.05 * rng.normal();
        phase[m] = rng.uniform(0.0, kTwoPi);
      }
      std::vector<double> u(n), v(n);
      for (int i = 0; i < H; ++i) {
        const double y = grid_coordinate(i, H);
        for (int j = 0; j < W; ++j) {
          const double x = grid_coordinate(j, W);
          const std::size_t idx = static_cast<std::size_t>(i) * W + j;
          u[idx] = std::tanh(std::sin(y - y0) / delta);
          for (int m = 0; m < 3; ++m) v[idx] += amp[m] * std::sin((m + 1) * x + phase[m]);
        }
      }
      omega = solver.curl(u, v);
      break;
    }
    case IcFamily::Piecewise: {
      const int pieces = 4 + static_cast<int>(rng.below(5));
      for (int b = 0; b < pieces; ++b) {
        const double cx = rng.uniform(0.0, kTwoPi);
        const double cy = rng.uniform(0.0, kTwoPi);
        const double hx = rng.uniform(0.3, 1.0);
        const double hy = rng.uniform(0.3, 1.0);
        const double val = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5);
        for (int i = 0; i < H; ++i) {
          if (std::abs(pdist(grid_coordinate(i, H) - cy)) > hy) continue;
          for (int j = 0; j < W; ++j) {
            if (std::abs(pdist(grid_coordinate(j, W) - cx)) <= hx) at(i, j) += val;
          }
        }
      }
      break;
    }
  }

  // Band-limit: remove the mean, soften the cutoff, then apply the 2/3 mask.
  Spectrum w = to_spectrum(omega, solver.grid());
  const double kc = 0.8 * 2.0 / 3.0 * solver.grid().kmax();
  for (std::size_t i = 0; i < n; ++i) {
    const double r = solver.grid().kmag()[i] / kc;
    w[i] *= solver.dealias_mask()[i] * std::exp(-std::pow(r, 8.0));
  }
  w[0] = 0.0;
  omega = to_real(std::move(w), solver.grid());

  const auto vel = solver.velocity(omega);
  const double peak = max_speed(vel.u, vel.v);
  if (!(peak > 0.0)) throw NumericError("initial condition has zero velocity");
  const double scale = cfg.velocity_scale / peak;
  for (double& x : omega) x *= scale;
  return omega;
}

std::vector<Trajectory> generate_dataset(const SolverConfig& cfg, int n_traj, int n_frames) {
  validate(cfg);
  if (n_traj < 0 || n_frames < 1) throw ConfigError("generate_dataset: bad counts");
  VorticitySolver solver(cfg);
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n_traj));
  for (int t = 0; t < n_traj; ++t) {
    Trajectory traj;
    traj.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(t));
    traj.frame_dt = cfg.frame_dt();
    traj.config = cfg;
    std::vector<double> omega = initial_vorticity(cfg, traj.seed);
    traj.frames.push_back(solver.state_from_vorticity(omega));
    for (int f = 1; f < n_frames; ++f) {
      for (int s = 0; s < cfg.steps_per_frame; ++s) omega = solver.step(omega);
      traj.frames.push_back(solver.state_from_vorticity(omega));
    }
    out.push_back(std::move(traj));
  }
  return out;
}

nlohmann::json solver_to_json(const SolverConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"nu", c.nu},
          {"dt", c.dt},
          {"steps_per_frame", c.steps_per_frame},
          {"family", to_string(c.family)},
          {"seed", c.seed},
          {"velocity_scale", c.velocity_scale},
          {"forcing_amplitude", c.forcing_amplitude},
          {"forcing_wavenumber", c.forcing_wavenumber}};
}

SolverConfig solver_from_json(const nlohmann::json& j) {
  SolverConfig c;
  try {
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.nu = j.value("nu", c.nu);
    c.dt = j.value("dt", c.dt);
    c.steps_per_frame = j.value("steps_per_frame", c.steps_per_frame);
    if (j.contains("family")) c.family = parse_ic_family(j.at("family").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.velocity_scale = j.value("velocity_scale", c.velocity_scale);
    c.forcing_amplitude = j.value("forcing_amplitude", c.forcing_amplitude);
    c.forcing_wavenumber = j.value("forcing_wavenumber", c.forcing_wavenumber);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("solver config: ") + e.what());
  }
  validate(c);
  return c;
}

nlohmann::json host_to_json(const SurrogateHostConfig& c) {
  return {{"mode_cutoff", c.mode_cutoff},
          {"bias_scale", c.bias_scale},
          {"noise_scale", c.noise_scale},
          {"noise_modes", c.noise_modes},
          {"seed", c.seed}};
}

SurrogateHostConfig host_from_json(const nlohmann::json& j) {
  SurrogateHostConfig c;
  try {
    c.mode_cutoff = j.value("mode_cutoff", c.mode_cutoff);
    c.bias_scale = j.value("bias_scale", c.bias_scale);
    c.noise_scale = j.value("noise_scale", c.noise_scale);
    c.noise_modes = j.value("noise_modes", c.noise_modes);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("host config: ") + e.what());
  }
  if (!(c.mode_cutoff > 0.0 && c.mode_cutoff <= 1.0)) {
    throw ConfigError("host mode_cutoff must lie in (0, 1]");
  }
  if (c.noise_scale < 0.0 || c.noise_modes < 1) throw ConfigError("bad host noise settings");
  return c;
}

namespace {

std::string traj_file_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "traj_%04d.bin", i);
  return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<Trajectory>& trajs) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "haloroute-dataset-v1";
  manifest["frames"] = trajs.empty() ? 0 : trajs.front().length();
  manifest["solver"] = trajs.empty() ? nlohmann::json::object() : solver_to_json(trajs.front().config);
  manifest["trajectories"] = nlohmann::json::array();
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto name = traj_file_name(static_cast<int>(i));
    write_field_sequence(dir / name, trajs[i].frames);
    manifest["trajectories"].push_back({{"file", name},
                                        {"seed", trajs[i].seed},
                                        {"frames", trajs[i].length()},
                                        {"hash", file_content_hash(dir / name)}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw ConfigError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

std::vector<Trajectory> read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigError("no dataset manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad dataset manifest: ") + e.what());
  }
  const SolverConfig cfg = solver_from_json(manifest.at("solver"));
  std::vector<Trajectory> out;
  for (const auto& entry : manifest.at("trajectories")) {
    Trajectory t;
    t.config = cfg;
    t.seed = entry.at("seed");
    t.frame_dt = cfg.frame_dt();
    t.frames = read_field_sequence(dir / entry.at("file").get<std::string>());
    if (t.length() != entry.at("frames").get<int>()) {
      throw ConfigError("trajectory " + entry.at("file").get<std::string>() + " is truncated");
    }
    out.push_back(std::move(t));
  }
  return out;
}

SurrogateHost::SurrogateHost(const SurrogateHostConfig& cfg, const SolverConfig& solver)
    : cfg_(cfg), solver_(solver) {
  if (!(cfg.mode_cutoff > 0.0 && cfg.mode_cutoff <= 1.0)) {
    throw ConfigError("mode_cutoff must lie in (0, 1]");
  }
  if (cfg.noise_modes < 1) throw ConfigError("noise_modes must be >= 1");
  const auto& g = solver_.grid();
  const std::size_t n = g.size();
  const double cut = cfg.mode_cutoff * g.kmax() + 1e-12;
  keep_.resize(n);
  bias_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool low = g.kmag()[i] <= cut;
    keep_[i] = low ? 1.0 : 0.0;
    bias_[i] = low ? 1.0 + cfg.bias_scale : 1.0;
  }
  const int H = solver.height;
  const int W = solver.width;
  Rng rng(cfg.seed);
  for (auto* eta : {&eta_u_, &eta_v_}) {
    eta->assign(n, 0.0);
    for (int ky = -cfg.noise_modes; ky <= cfg.noise_modes; ++ky) {
      for (int kx = -cfg.noise_modes; kx <= cfg.noise_modes; ++kx) {
        const double amp = rng.normal();
        const double phase = rng.uniform(0.0, kTwoPi);
        for (int i = 0; i < H; ++i) {
          for (int j = 0; j < W; ++j) {
            (*eta)[static_cast<std::size_t>(i) * W + j] +=
                amp * std::cos(kx * grid_coordinate(j, W) + ky * grid_coordinate(i, H) + phase);
          }
        }
      }
    }
    double peak = 0.0;
    for (double e : *eta) peak = std::max(peak, std::abs(e));
    for (double& e : *eta) e /= peak;
  }
}

Tensor SurrogateHost::forecast_impl(const Tensor& x, Tape* tape) const {
  require_state_field(x, "surrogate_forecast");
  const auto& g = solver_.grid();
  if (x.height() != g.height() || x.width() != g.width()) {
    throw GeometryError("surrogate_forecast: field grid does not match solver");
  }
  std::vector<double> omega = g.apply(solver_.curl(x.plane(0), x.plane(1)), keep_);
  if (tape) tape->steps.resize(static_cast<std::size_t>(solver_.config().steps_per_frame));
  for (int s = 0; s < solver_.config().steps_per_frame; ++s) {
    omega = tape ? solver_.step_taped(omega, tape->steps[static_cast<std::size_t>(s)])
                 : solver_.step(omega);
  }
  if (cfg_.bias_scale != 0.0) omega = g.apply(omega, bias_);

  Tensor out = solver_.state_from_vorticity(omega);
  if (cfg_.noise_scale != 0.0) {
    auto ux = g.derivative_x(out.plane(0));
    auto uy = g.derivative_y(out.plane(0));
    auto vx = g.derivative_x(out.plane(1));
    auto vy = g.derivative_y(out.plane(1));
    std::vector<double> gmag(g.size());
    auto u = out.plane(0);
    auto v = out.plane(1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gmag[i] = std::sqrt(ux[i] * ux[i] + uy[i] * uy[i] + vx[i] * vx[i] + vy[i] * vy[i] + 1e-12);
      u[i] += cfg_.noise_scale * eta_u_[i] * gmag[i];
      v[i] += cfg_.noise_scale * eta_v_[i] * gmag[i];
    }
    if (tape) {
      tape->ux = std::move(ux);
      tape->uy = std::move(uy);
      tape->vx = std::move(vx);
      tape->vy = std::move(vy);
      tape->gmag = std::move(gmag);
    }
  }
  return out;
}

Tensor SurrogateHost::forecast(const Tensor& x) const { return forecast_impl(x, nullptr); }

Tensor SurrogateHost::forecast_taped(const Tensor& x, Tape& tape) const {
  return forecast_impl(x, &tape);
}

Tensor SurrogateHost::vjp(const Tape& tape, const Tensor& grad_out) const {
  const auto& g = solver_.grid();
  const std::size_t n = g.size();
  std::vector<double> gu(grad_out.plane(0).begin(), grad_out.plane(0).end());
  std::vector<double> gv(grad_out.plane(1).begin(), grad_out.plane(1).end());

  if (cfg_.noise_scale != 0.0) {
    std::vector<double> a(n), t1(n), t2(n), t3(n), t4(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = cfg_.noise_scale * (gu[i] * eta_u_[i] + gv[i] * eta_v_[i]) / tape.gmag[i];
      t1[i] = a[i] * tape.ux[i];
      t2[i] = a[i] * tape.uy[i];
      t3[i] = a[i] * tape.vx[i];
      t4[i] = a[i] * tape.vy[i];
    }
    const auto d1 = g.derivative_x(t1);
    const auto d2 = g.derivative_y(t2);
    const auto d3 = g.derivative_x(t3);
    const auto d4 = g.derivative_y(t4);
    for (std::size_t i = 0; i < n; ++i) {
      gu[i] -= d1[i] + d2[i];
      gv[i] -= d3[i] + d4[i];
    }
  }

  // (u, v, psi, omega) all derive from the final vorticity.
  Spectrum gu_h = fft2(gu, g.height(), g.width());
  Spectrum gv_h = fft2(gv, g.height(), g.width());
  Spectrum gp_h = fft2(grad_out.plane(2), g.height(), g.width());
  Spectrum gw_h = fft2(grad_out.plane(3), g.height(), g.width());
  for (std::size_t i = 0; i < n; ++i) {
    const double ik2 = g.k2()[i] > 0.0 ? 1.0 / g.k2()[i] : 0.0;
    gw_h[i] += ik2 * (gp_h[i] - g.ddy()[i] * gu_h[i] + g.ddx()[i] * gv_h[i]);
    gw_h[i] *= bias_[i];
  }
  std::vector<double> gw(n);
  ifft2_real(std::move(gw_h), g.height(), g.width(), gw);

  for (auto it = tape.steps.rbegin(); it != tape.steps.rend(); ++it) {
    gw = solver_.step_adjoint(*it, gw);
  }
  gw = g.apply(gw, keep_);

  Tensor out(kStateChannels, g.height(), g.width());
  const auto gin_u = g.derivative_y(gw);
  const auto gin_v = g.derivative_x(gw);
  auto ou = out.plane(0);
  auto ov = out.plane(1);
  for (std::size_t i = 0; i < n; ++i) {
    ou[i] = gin_u[i];
    ov[i] = -gin_v[i];
  }
  return out;
}

Tensor surrogate_forecast(const Tensor& x, const SurrogateHostConfig& cfg,
                          const SolverConfig& solver) {
  return SurrogateHost(cfg, solver).forecast(x);
}

}  // namespace haloroute
