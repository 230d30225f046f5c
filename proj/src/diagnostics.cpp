#include "haloroute/diagnostics.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "haloroute/fields.hpp"
#include "haloroute/spectral.hpp"

namespace haloroute {

namespace {

void require_velocity(const Tensor& f, const char* what) {
  if (f.batch() != 1 || f.channels() < kVelocityChannels) {
    throw GeometryError(std::string(what) + ": needs a field with velocity channels, got " +
                        f.shape_string());
  }
}

}  // namespace

double mean_abs_divergence(const Tensor& f) {
  require_velocity(f, "mean_abs_divergence");
  const int h = f.height(), w = f.width();
  const double dx = 2.0 * std::numbers::pi / w, dy = 2.0 * std::numbers::pi / h;
  double s = 0.0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double du = (f.at(0, i, (j + 1) % w) - f.at(0, i, (j + w - 1) % w)) / (2.0 * dx);
      const double dv = (f.at(1, (i + 1) % h, j) - f.at(1, (i + h - 1) % h, j)) / (2.0 * dy);
      s += std::abs(du + dv);
    }
  }
  return s / (static_cast<double>(h) * w);
}

double kinetic_energy(const Tensor& f) {
  require_velocity(f, "kinetic_energy");
  double s = 0.0;
  const auto u = f.plane(0), v = f.plane(1);
  for (std::size_t p = 0; p < u.size(); ++p) s += 0.5 * (u[p] * u[p] + v[p] * v[p]);
  return s / static_cast<double>(u.size());
}

double enstrophy(const Tensor& f) {
  require_velocity(f, "enstrophy");
  const SpectralGrid grid(f.height(), f.width());
  const auto vx = grid.derivative_x(f.plane(1));
  const auto uy = grid.derivative_y(f.plane(0));
  double s = 0.0;
  for (std::size_t p = 0; p < vx.size(); ++p) {
    const double w = vx[p] - uy[p];
    s += 0.5 * w * w;
  }
  return s / static_cast<double>(vx.size());
}

std::vector<double> ke_spectrum(const Tensor& f) {
  require_velocity(f, "ke_spectrum");
  const int h = f.height(), w = f.width();
  const SpectralGrid grid(h, w);
  const Spectrum u = fft2(f.plane(0), h, w);
  const Spectrum v = fft2(f.plane(1), h, w);
  double kmax = 0.0;
  for (double k : grid.kmag()) kmax = std::max(kmax, k);
  std::vector<double> e(static_cast<std::size_t>(std::lround(kmax)) + 1, 0.0);
  const double n2 = static_cast<double>(grid.size()) * static_cast<double>(grid.size());
  for (std::size_t m = 0; m < u.size(); ++m) {
    const auto shell = static_cast<std::size_t>(std::lround(grid.kmag()[m]));
    e[shell] += 0.5 * (std::norm(u[m]) + std::norm(v[m])) / n2;
  }
  return e;
}

double high_band_energy(std::span<const double> spectrum, int height, int width) {
  const double cut = 0.5 * (std::min(height, width) / 2);
  double s = 0.0;
  for (std::size_t k = 0; k < spectrum.size(); ++k) {
    if (static_cast<double>(k) > cut) s += spectrum[k];
  }
  return s;
}

double drift(double q_initial, double q_final) {
  if (q_initial == 0.0) throw NumericError("drift relative to a zero initial value");
  return (q_final - q_initial) / std::abs(q_initial);
}

std::vector<double> average_spectra(std::span<const std::vector<double>> spectra) {
  if (spectra.empty()) throw NumericError("average of zero spectra");
  std::vector<double> out(spectra.front().size(), 0.0);
  for (const auto& s : spectra) {
    if (s.size() != out.size()) throw GeometryError("spectra differ in length");
    for (std::size_t k = 0; k < s.size(); ++k) out[k] += s[k];
  }
  for (double& v : out) v /= static_cast<double>(spectra.size());
  return out;
}

nlohmann::json DiagnosticsReport::to_json() const {
  return {{"mean_abs_divergence", divergence}, {"kinetic_energy", kinetic_energy},
          {"enstrophy", enstrophy},            {"high_band_energy", high_band_energy},
          {"ke_spectrum", spectrum}};
}

DiagnosticsReport diagnose(const Tensor& f) {
  DiagnosticsReport r;
  r.divergence = mean_abs_divergence(f);
  r.kinetic_energy = kinetic_energy(f);
  r.enstrophy = enstrophy(f);
  r.spectrum = ke_spectrum(f);
  r.high_band_energy = high_band_energy(r.spectrum, f.height(), f.width());
  return r;
}

std::string spectrum_csv(std::span<const double> spectrum) {
  std::ostringstream os;
  os.precision(17);
  os << "shell,energy\n";
  for (std::size_t k = 0; k < spectrum.size(); ++k) os << k << ',' << spectrum[k] << '\n';
  return os.str();
}

}  // namespace haloroute
