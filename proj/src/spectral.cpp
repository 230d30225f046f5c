#include "haloroute/spectral.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace haloroute {
namespace {

// FFTW planning is not thread-safe; execution with new-array execute is.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(int height, int width, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(height, width, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    std::vector<Complex> scratch(static_cast<std::size_t>(height) * width);
    auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
    fftw_plan plan =
        fftw_plan_dft_2d(height, width, buf, buf, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (plan == nullptr) throw NumericError("FFTW failed to create a plan");
    plans_.emplace(key, plan);
    return plan;
  }

  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

void execute(Spectrum& data, int height, int width, int sign) {
  if (data.size() != static_cast<std::size_t>(height) * width) {
    throw GeometryError("fft: buffer size does not match grid");
  }
  fftw_plan plan = PlanCache::instance().get(height, width, sign);
  auto* buf = reinterpret_cast<fftw_complex*>(data.data());
  fftw_execute_dft(plan, buf, buf);
}

}  // namespace

Spectrum fft2(std::span<const double> plane, int height, int width) {
  Spectrum data(plane.begin(), plane.end());
  execute(data, height, width, FFTW_FORWARD);
  return data;
}

void fft2_inplace(Spectrum& data, int height, int width) {
  execute(data, height, width, FFTW_FORWARD);
}

void ifft2_unnormalized_inplace(Spectrum& data, int height, int width) {
  execute(data, height, width, FFTW_BACKWARD);
}

void ifft2_real(Spectrum data, int height, int width, std::span<double> out) {
  execute(data, height, width, FFTW_BACKWARD);
  const double inv = 1.0 / (static_cast<double>(height) * width);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = data[i].real() * inv;
}

SpectralGrid::SpectralGrid(int height, int width)
    : height_(height), width_(width), kmax_(std::min(height, width) / 2) {
  if (height <= 0 || width <= 0) throw GeometryError("SpectralGrid: empty grid");
  const std::size_t n = size();
  ddx_.resize(n);
  ddy_.resize(n);
  k2_.resize(n);
  kmag_.resize(n);
  for (int i = 0; i < height; ++i) {
    const int ky = wavenumber(i, height);
    const bool nyq_y = height % 2 == 0 && i == height / 2;
    for (int j = 0; j < width; ++j) {
      const int kx = wavenumber(j, width);
      const bool nyq_x = width % 2 == 0 && j == width / 2;
      const std::size_t idx = static_cast<std::size_t>(i) * width + j;
      ddx_[idx] = nyq_x ? Complex{} : Complex(0.0, kx);
      ddy_[idx] = nyq_y ? Complex{} : Complex(0.0, ky);
      k2_[idx] = static_cast<double>(kx) * kx + static_cast<double>(ky) * ky;
      kmag_[idx] = std::sqrt(k2_[idx]);
    }
  }
}

std::vector<double> SpectralGrid::apply(std::span<const double> f, std::span<const Complex> mult,
                                        bool transpose) const {
  Spectrum s = fft2(f, height_, width_);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] *= transpose ? std::conj(mult[i]) : mult[i];
  std::vector<double> out(size());
  ifft2_real(std::move(s), height_, width_, out);
  return out;
}

std::vector<double> SpectralGrid::apply(std::span<const double> f,
                                        std::span<const double> mult) const {
  Spectrum s = fft2(f, height_, width_);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] *= mult[i];
  std::vector<double> out(size());
  ifft2_real(std::move(s), height_, width_, out);
  return out;
}

std::vector<double> SpectralGrid::derivative_x(std::span<const double> f) const {
  return apply(f, ddx_);
}

std::vector<double> SpectralGrid::derivative_y(std::span<const double> f) const {
  return apply(f, ddy_);
}

}  // namespace haloroute
