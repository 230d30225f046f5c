#pragma once

// Synthetic incompressible-flow benchmark: a pseudo-spectral vorticity
// solver that produces ground truth, and a degraded "frozen host" surrogate
// built on the same solver.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "haloroute/spectral.hpp"
#include "haloroute/tensor.hpp"

namespace haloroute {

enum class IcFamily { Gaussian, Sines, Shear, Piecewise };

std::string to_string(IcFamily f);
/// Throws ConfigError on an unknown tag.
IcFamily parse_ic_family(const std::string& tag);

struct SolverConfig {
  int height = 64;
  int width = 64;
  double nu = 1.0e-3;
  /// Solver time step.
  double dt = 0.025;
  /// Solver steps between recorded frames (and per host forecast).
  int steps_per_frame = 8;
  IcFamily family = IcFamily::Shear;
  std::uint64_t seed = 0;
  /// Peak initial speed after normalization.
  double velocity_scale = 1.0;
  /// Optional constant forcing f = A sin(k_f y) on the vorticity equation.
  double forcing_amplitude = 0.0;
  int forcing_wavenumber = 4;

  double frame_dt() const { return dt * steps_per_frame; }
};

void validate(const SolverConfig& cfg);

struct VelocityFields {
  std::vector<double> u;
  std::vector<double> v;
  std::vector<double> psi;
};

/// Vorticity-form Navier-Stokes on the periodic square: spectral
/// derivatives, 2/3-rule dealiasing (|k| <= kmax * 2/3), integrating factor
/// for viscosity, classical RK4 for the advection term.
class VorticitySolver {
 public:
  explicit VorticitySolver(const SolverConfig& cfg);

  const SolverConfig& config() const { return cfg_; }
  const SpectralGrid& grid() const { return grid_; }
  /// 1 on retained modes, 0 above the 2/3 cutoff.
  const std::vector<double>& dealias_mask() const { return dealias_; }

  /// One time step. Throws NumericError if the CFL number reaches 0.5.
  std::vector<double> step(std::span<const double> omega) const;

  /// Per-stage real-space quantities kept for the adjoint.
  struct StageTape {
    std::vector<double> u, v, wx, wy;
  };
  struct StepTape {
    StageTape stage[4];
  };
  std::vector<double> step_taped(std::span<const double> omega, StepTape& tape) const;
  /// Vector-Jacobian product of one step: d(out)/d(omega)^T * grad_out.
  std::vector<double> step_adjoint(const StepTape& tape, std::span<const double> grad_out) const;

  /// dt * max|u| * H / (2 pi) for the velocity induced by omega.
  double cfl_number(std::span<const double> omega) const;

  VelocityFields velocity(std::span<const double> omega) const;
  /// omega = dv/dx - du/dy, spectrally.
  std::vector<double> curl(std::span<const double> u, std::span<const double> v) const;

  /// [4, H, W] state (u, v, psi, omega).
  Tensor state_from_vorticity(std::span<const double> omega) const;

 private:
  std::vector<double> step_impl(std::span<const double> omega, StepTape* tape) const;
  Spectrum nonlinear(const Spectrum& w_hat, StageTape* tape) const;
  Spectrum nonlinear_adjoint(const StageTape& tape, const Spectrum& g_hat) const;

  SolverConfig cfg_;
  SpectralGrid grid_;
  std::vector<double> dealias_;
  std::vector<double> inv_k2_;
  std::vector<double> ef_half_;
  std::vector<double> ef_full_;
  Spectrum forcing_hat_;
};

/// Free-function form of VorticitySolver::step.
std::vector<double> ns_step(std::span<const double> omega, const SolverConfig& cfg);

/// Initial vorticity for cfg.family, seeded by `seed`, band-limited and
/// scaled so the peak speed equals cfg.velocity_scale.
std::vector<double> initial_vorticity(const SolverConfig& cfg, std::uint64_t seed);

struct Trajectory {
  std::vector<Tensor> frames;
  double frame_dt = 0.0;
  std::uint64_t seed = 0;
  SolverConfig config;

  int length() const { return static_cast<int>(frames.size()); }
};

/// n_traj trajectories of n_frames frames each; trajectory i is seeded
/// with derive_seed(cfg.seed, i). Channels are (u, v, psi, omega).
std::vector<Trajectory> generate_dataset(const SolverConfig& cfg, int n_traj, int n_frames);

/// Dataset directory: traj_XXXX.bin (concatenated field records) plus
/// manifest.json (solver config, seeds, frame count, file hashes).
void write_dataset(const std::filesystem::path& dir, const std::vector<Trajectory>& trajs);
std::vector<Trajectory> read_dataset(const std::filesystem::path& dir);

struct SurrogateHostConfig {
  /// Spectral truncation: keep |k| <= mode_cutoff * kmax of the input.
  double mode_cutoff = 0.5;
  /// Retained low modes of the forecast are scaled by (1 + bias_scale).
  double bias_scale = 0.02;
  /// Amplitude of the gradient-weighted smooth perturbation.
  double noise_scale = 0.02;
  /// Highest wavenumber in the smooth perturbation pattern.
  int noise_modes = 3;
  std::uint64_t seed = 7;
};

/// Degraded frozen forecaster. It reads only the velocity channels,
/// truncates, advances one frame interval with the reference solver, biases
/// the low modes and adds a fixed smooth perturbation weighted by the local
/// velocity-gradient magnitude, so its error concentrates at sharp shear
/// and vortex structures. Deterministic: equal inputs give bit-equal
/// outputs. Differentiable w.r.t. its input (never its configuration).
class SurrogateHost {
 public:
  SurrogateHost(const SurrogateHostConfig& cfg, const SolverConfig& solver);

  const SurrogateHostConfig& config() const { return cfg_; }
  const VorticitySolver& solver() const { return solver_; }

  Tensor forecast(const Tensor& x) const;

  struct Tape {
    std::vector<VorticitySolver::StepTape> steps;
    std::vector<double> ux, uy, vx, vy, gmag;
  };
  Tensor forecast_taped(const Tensor& x, Tape& tape) const;
  /// Gradient w.r.t. the input state; the scalar channels get zero.
  Tensor vjp(const Tape& tape, const Tensor& grad_out) const;

 private:
  Tensor forecast_impl(const Tensor& x, Tape* tape) const;

  SurrogateHostConfig cfg_;
  VorticitySolver solver_;
  std::vector<double> keep_;
  std::vector<double> bias_;
  std::vector<double> eta_u_;
  std::vector<double> eta_v_;
};

Tensor surrogate_forecast(const Tensor& x, const SurrogateHostConfig& cfg,
                          const SolverConfig& solver);

/// JSON forms; missing keys keep their defaults, bad values raise
/// ConfigError.
nlohmann::json solver_to_json(const SolverConfig& c);
SolverConfig solver_from_json(const nlohmann::json& j);
nlohmann::json host_to_json(const SurrogateHostConfig& c);
SurrogateHostConfig host_from_json(const nlohmann::json& j);

}  // namespace haloroute
