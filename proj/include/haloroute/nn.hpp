#pragma once

// Minimal differentiable layers with hand-written reverse-mode gradients.
// There is no autodiff graph: every layer implements forward/backward and
// containers compose them explicitly. Gradients live in a Gradients object
// that mirrors the parameter list entry for entry, so several backward
// passes can accumulate into separate buffers and be reduced in a fixed
// order.

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "haloroute/rng.hpp"
#include "haloroute/tensor.hpp"

namespace haloroute::nn {

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;

  std::size_t size() const { return value.size(); }
};

Parameter make_parameter(std::string name, std::vector<int> shape);

using ParameterList = std::vector<Parameter*>;
using ConstParameterList = std::vector<const Parameter*>;

/// Gradient accumulators with the same shapes as a parameter list.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ConstParameterList& params);
  explicit Gradients(const ParameterList& params)
      : Gradients(ConstParameterList(params.begin(), params.end())) {}

  std::size_t count() const { return grads_.size(); }
  std::vector<double>& operator[](std::size_t i) { return grads_[i]; }
  const std::vector<double>& operator[](std::size_t i) const { return grads_[i]; }
  std::span<std::vector<double>> slice(std::size_t offset, std::size_t n) {
    return std::span(grads_).subspan(offset, n);
  }

  void zero();
  void add(const Gradients& other);
  void scale(double s);
  double norm() const;
  bool all_finite() const;

 private:
  std::vector<std::vector<double>> grads_;
};

using GradSlice = std::span<std::vector<double>>;

/// Whatever a layer needs from its forward pass to run backward.
struct LayerCache {
  Tensor input;
  std::vector<Tensor> extra;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual std::string kind() const = 0;
  /// `cache` may be null for inference-only calls.
  virtual Tensor forward(const Tensor& x, LayerCache* cache) const = 0;
  /// Returns dL/dx and accumulates parameter gradients into `grads`
  /// (one entry per parameter, in parameters() order).
  virtual Tensor backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const = 0;
  virtual ParameterList parameters() { return {}; }
  ConstParameterList parameters() const;
};

enum class Init { Default, Zero };

/// 2-D cross-correlation with circular padding of (kernel - 1) / 2.
class Conv2d final : public Layer {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, Rng& rng,
         Init init = Init::Default);

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
  std::string kind() const override { return "conv2d"; }
  Tensor forward(const Tensor& x, LayerCache* cache) const override;
  Tensor backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const override;
  ParameterList parameters() override { return {&weight_, &bias_}; }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return kernel_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  int in_;
  int out_;
  int kernel_;
  Parameter weight_;  // [out, in, k, k]
  Parameter bias_;    // [out]
};

/// Fourier-space channel mixing on modes |k_x|, |k_y| < modes, zero-filled
/// elsewhere, real part of the inverse transform. Weights are complex,
/// stored as interleaved (re, im) pairs with shape [in, out, R, 2].
class SpectralConv2d final : public Layer {
 public:
  SpectralConv2d(std::string name, int in_channels, int out_channels, int modes, Rng& rng,
                 Init init = Init::Default);

  std::unique_ptr<Layer> clone() const override { return std::make_unique<SpectralConv2d>(*this); }
  std::string kind() const override { return "spectral_conv2d"; }
  Tensor forward(const Tensor& x, LayerCache* cache) const override;
  Tensor backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const override;
  ParameterList parameters() override { return {&weight_}; }

  int modes() const { return modes_; }
  /// Signed (k_y, k_x) of retained mode r.
  std::pair<int, int> mode(int r) const;
  int retained() const { return (2 * modes_ - 1) * (2 * modes_ - 1); }
  Parameter& weight() { return weight_; }

 private:
  int in_;
  int out_;
  int modes_;
  Parameter weight_;
};

/// tanh-form GELU.
class Gelu final : public Layer {
 public:
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Gelu>(*this); }
  std::string kind() const override { return "gelu"; }
  Tensor forward(const Tensor& x, LayerCache* cache) const override;
  Tensor backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const override;
};

double gelu(double x);
double gelu_derivative(double x);

/// Per-pixel normalization over channels with learned scale and shift.
class ChannelNorm final : public Layer {
 public:
  ChannelNorm(std::string name, int channels, double eps = 1e-6);

  std::unique_ptr<Layer> clone() const override { return std::make_unique<ChannelNorm>(*this); }
  std::string kind() const override { return "channel_norm"; }
  Tensor forward(const Tensor& x, LayerCache* cache) const override;
  Tensor backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const override;
  ParameterList parameters() override { return {&gamma_, &beta_}; }

 private:
  int channels_;
  double eps_;
  Parameter gamma_;
  Parameter beta_;
};

/// h <- GELU(Spec(h) + W h): spectral convolution plus a 1x1 skip.
class FourierBlock final : public Layer {
 public:
  FourierBlock(std::string name, int width, int modes, Rng& rng);

  std::unique_ptr<Layer> clone() const override { return std::make_unique<FourierBlock>(*this); }
  std::string kind() const override { return "fourier_block"; }
  Tensor forward(const Tensor& x, LayerCache* cache) const override;
  Tensor backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const override;
  ParameterList parameters() override;

  SpectralConv2d& spectral() { return spectral_; }
  Conv2d& skip() { return skip_; }

 private:
  SpectralConv2d spectral_;
  Conv2d skip_;
};

/// Layers applied in order.
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  void add(std::unique_ptr<Layer> layer);
  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

  struct Cache {
    std::vector<LayerCache> layers;
  };

  Tensor forward(const Tensor& x, Cache* cache) const;
  /// Accumulates into `grads`, which must mirror parameters().
  Tensor backward(const Tensor& dy, const Cache& cache, Gradients& grads) const;

  ParameterList parameters();
  ConstParameterList parameters() const;
  std::size_t parameter_count() const;

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Snapshot / restore of parameter values (for early stopping).
std::vector<std::vector<double>> snapshot(const ConstParameterList& params);
void restore(const ParameterList& params, const std::vector<std::vector<double>>& values);

/// Git-style hash over names, shapes and raw values of a parameter list.
std::string parameter_checksum(const ConstParameterList& params);
inline std::string parameter_checksum(const ParameterList& params) {
  return parameter_checksum(ConstParameterList(params.begin(), params.end()));
}

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled, multiplicative weight decay and bias-corrected
/// moments.
class AdamW {
 public:
  AdamW(const ConstParameterList& params, AdamWConfig cfg);

  /// One update with learning rate `lr` (schedulers pass their value).
  void step(const ParameterList& params, const Gradients& grads, double lr);
  void step(const ParameterList& params, const Gradients& grads) { step(params, grads, cfg_.lr); }

  const AdamWConfig& config() const { return cfg_; }
  long step_count() const { return t_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }
  void set_state(long t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Rescales all gradients to global norm `max_norm` if they exceed it.
/// Returns the factor applied (1 when untouched).
double clip_grad_norm(Gradients& grads, double max_norm);

/// Checkpoint: `<base>.bin` holds named tensors (magic "HRCK", count, then
/// per tensor name, dims and float64 values, little-endian); `<base>.json`
/// is the text manifest. Values round-trip bit-exactly.
void save_checkpoint(const std::filesystem::path& base, const ConstParameterList& params,
                     const nlohmann::json& manifest);
/// Loads values into `params`; names and shapes must match.
nlohmann::json load_checkpoint(const std::filesystem::path& base, const ParameterList& params);

/// Raw named-tensor blob I/O used by checkpoints and optimizer state.
void write_tensor_blob(const std::filesystem::path& path, const ConstParameterList& tensors);
std::vector<Parameter> read_tensor_blob(const std::filesystem::path& path);

}  // namespace haloroute::nn
