#pragma once

// Spectral helpers on the periodic [0, 2 pi)^2 grid. FFTs are backed by
// FFTW with plans cached per grid size; execution is thread-safe.

#include <complex>
#include <span>
#include <vector>

#include "haloroute/tensor.hpp"

namespace haloroute {

using Complex = std::complex<double>;
using Spectrum = std::vector<Complex>;

/// Unnormalized forward 2-D DFT of a real H x W plane.
Spectrum fft2(std::span<const double> plane, int height, int width);

/// Unnormalized forward 2-D DFT of a complex plane, in place.
void fft2_inplace(Spectrum& data, int height, int width);

/// Unnormalized backward 2-D DFT, in place (no 1/N factor).
void ifft2_unnormalized_inplace(Spectrum& data, int height, int width);

/// Normalized inverse DFT, real part written into `out`.
void ifft2_real(Spectrum data, int height, int width, std::span<double> out);

/// Signed integer wavenumber of FFT index `i` on an n-point axis.
inline int wavenumber(int i, int n) { return i <= n / 2 ? i : i - n; }

/// Precomputed wavenumber tables and real-preserving spectral operators for
/// one grid. Every operator is a Fourier multiplier m(k) with
/// m(-k) = conj(m(k)); its transpose is the multiplier conj(m(k)).
class SpectralGrid {
 public:
  SpectralGrid(int height, int width);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return static_cast<std::size_t>(height_) * width_; }

  /// ik_x and ik_y per mode; zero on Nyquist lines so derivatives stay real.
  const std::vector<Complex>& ddx() const { return ddx_; }
  const std::vector<Complex>& ddy() const { return ddy_; }
  /// |k|^2 per mode.
  const std::vector<double>& k2() const { return k2_; }
  /// Euclidean |k| per mode (signed wavenumbers).
  const std::vector<double>& kmag() const { return kmag_; }
  /// Largest resolved wavenumber per axis, min(H, W) / 2.
  int kmax() const { return kmax_; }

  /// Real-space derivative by spectral multiplication.
  std::vector<double> derivative_x(std::span<const double> f) const;
  std::vector<double> derivative_y(std::span<const double> f) const;

  /// Apply a real-preserving multiplier; `transpose` uses conj(m).
  std::vector<double> apply(std::span<const double> f, std::span<const Complex> mult,
                            bool transpose = false) const;
  std::vector<double> apply(std::span<const double> f, std::span<const double> mult) const;

 private:
  int height_;
  int width_;
  int kmax_;
  std::vector<Complex> ddx_;
  std::vector<Complex> ddy_;
  std::vector<double> k2_;
  std::vector<double> kmag_;
};

}  // namespace haloroute
