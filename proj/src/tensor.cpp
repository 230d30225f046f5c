#include "haloroute/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace haloroute {

Tensor::Tensor(int batch, int channels, int height, int width, double fill)
    : batch_(batch), channels_(channels), height_(height), width_(width) {
  if (batch < 0 || channels < 0 || height < 0 || width < 0) {
    throw GeometryError("negative tensor dimension");
  }
  data_.assign(static_cast<std::size_t>(batch) * channels * height * width, fill);
}

std::span<double> Tensor::plane(int n, int c) {
  return {data_.data() + index(n, c, 0, 0), plane_size()};
}

std::span<const double> Tensor::plane(int n, int c) const {
  return {data_.data() + index(n, c, 0, 0), plane_size()};
}

bool Tensor::same_shape(const Tensor& other) const {
  return batch_ == other.batch_ && channels_ == other.channels_ && height_ == other.height_ &&
         width_ == other.width_;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[' << batch_ << ',' << channels_ << ',' << height_ << ',' << width_ << ']';
  return os.str();
}

Tensor Tensor::sample(int n) const {
  Tensor out(1, channels_, height_, width_);
  const std::size_t stride = static_cast<std::size_t>(channels_) * plane_size();
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(n * stride), stride, out.data_.begin());
  return out;
}

void Tensor::set_sample(int n, const Tensor& t) {
  if (t.channels_ != channels_ || t.height_ != height_ || t.width_ != width_ || t.batch_ != 1) {
    throw GeometryError("set_sample: shape mismatch " + t.shape_string() + " into " + shape_string());
  }
  const std::size_t stride = static_cast<std::size_t>(channels_) * plane_size();
  std::copy(t.data_.begin(), t.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(n * stride));
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw GeometryError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                        b.shape_string());
  }
}

void axpy(Tensor& a, const Tensor& b, double scale) {
  require_same_shape(a, b, "axpy");
  auto& x = a.storage();
  const auto& y = b.storage();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += scale * y[i];
}

double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.storage()) s += v * v;
  return s;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.storage().data(), b.storage().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace haloroute
