#pragma once

// Physical-fidelity diagnostics on velocity fields.

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "haloroute/tensor.hpp"

namespace haloroute {

/// Mean |du/dx + dv/dy| with periodic central differences.
double mean_abs_divergence(const Tensor& f);

/// Spatial mean of (u^2 + v^2) / 2.
double kinetic_energy(const Tensor& f);

/// Spatial mean of omega^2 / 2, omega = dv/dx - du/dy taken spectrally.
double enstrophy(const Tensor& f);

/// E(k) on integer shells k = round(|k|): (|u_k|^2 + |v_k|^2) / (2 (HW)^2)
/// summed per shell, so sum_k E(k) equals kinetic_energy(f).
std::vector<double> ke_spectrum(const Tensor& f);

/// Energy in shells k > kmax / 2, kmax = min(H, W) / 2.
double high_band_energy(std::span<const double> spectrum, int height, int width);

/// (q_final - q_initial) / |q_initial|; NumericError when q_initial == 0.
double drift(double q_initial, double q_final);

/// Shell-wise mean of equally long spectra.
std::vector<double> average_spectra(std::span<const std::vector<double>> spectra);

struct DiagnosticsReport {
  double divergence = 0.0;
  double kinetic_energy = 0.0;
  double enstrophy = 0.0;
  double high_band_energy = 0.0;
  std::vector<double> spectrum;

  nlohmann::json to_json() const;
};

DiagnosticsReport diagnose(const Tensor& f);

/// "shell,energy" rows, one per shell.
std::string spectrum_csv(std::span<const double> spectrum);

}  // namespace haloroute
