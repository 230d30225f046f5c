#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace haloroute {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Block geometry, halo or shape disagreement between inputs.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: CFL violation, non-finite values, empty statistics.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration value or unreadable file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage was requested before the stage it depends on.
class DependencyError : public Error {
 public:
  using Error::Error;
};

/// Dense real tensor with layout [N, C, H, W], row-major. Single fields use
/// N == 1; the batch axis exists so that stacks of halo windows go through
/// the network layers in one call.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0)
      : Tensor(1, channels, height, width, fill) {}
  Tensor(int batch, int channels, int height, int width, double fill = 0.0);

  int batch() const { return batch_; }
  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int c, int i, int j) { return data_[index(0, c, i, j)]; }
  double at(int c, int i, int j) const { return data_[index(0, c, i, j)]; }
  double& at(int n, int c, int i, int j) { return data_[index(n, c, i, j)]; }
  double at(int n, int c, int i, int j) const { return data_[index(n, c, i, j)]; }

  std::span<double> plane(int n, int c);
  std::span<const double> plane(int n, int c) const;
  std::span<double> plane(int c) { return plane(0, c); }
  std::span<const double> plane(int c) const { return plane(0, c); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  bool same_shape(const Tensor& other) const;
  std::string shape_string() const;

  /// Single sample n of a batch, as a [1, C, H, W] tensor.
  Tensor sample(int n) const;
  void set_sample(int n, const Tensor& t);

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t index(int n, int c, int i, int j) const {
    return ((static_cast<std::size_t>(n) * channels_ + c) * height_ + i) * width_ + j;
  }

  int batch_ = 0;
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// a += scale * b
void axpy(Tensor& a, const Tensor& b, double scale = 1.0);

/// Sum of squares over all entries.
double squared_norm(const Tensor& t);

/// Exact bitwise comparison (distinguishes -0.0 and NaN payloads).
bool bit_identical(const Tensor& a, const Tensor& b);

}  // namespace haloroute
