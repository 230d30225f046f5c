#include "haloroute/nn.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include <Eigen/Core>

#include "haloroute/hash.hpp"
#include "haloroute/spectral.hpp"

namespace haloroute::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int wrap(int i, int n) {
  const int r = i % n;
  return r < 0 ? r + n : r;
}

void require_channels(const Tensor& x, int channels, const std::string& who) {
  if (x.channels() != channels) {
    throw GeometryError(who + ": expected " + std::to_string(channels) + " channels, got " +
                        x.shape_string());
  }
}

void require_grad_slots(GradSlice grads, std::size_t n, const std::string& who) {
  if (grads.size() != n) throw GeometryError(who + ": gradient slice has wrong length");
}

// cols[r, n*HW + i*W + j] = x[n, c, i + di - pad, j + dj - pad] with
// r = (c*k + di)*k + dj and periodic wrap.
RowMatrix im2col(const Tensor& x, int k) {
  const int pad = (k - 1) / 2;
  const int n_batch = x.batch(), c_in = x.channels(), h = x.height(), w = x.width();
  const std::size_t hw = x.plane_size();
  RowMatrix cols(static_cast<Eigen::Index>(c_in) * k * k,
                 static_cast<Eigen::Index>(n_batch) * static_cast<Eigen::Index>(hw));
  for (int c = 0; c < c_in; ++c) {
    for (int di = 0; di < k; ++di) {
      for (int dj = 0; dj < k; ++dj) {
        const Eigen::Index r = (static_cast<Eigen::Index>(c) * k + di) * k + dj;
        double* row = cols.row(r).data();
        for (int n = 0; n < n_batch; ++n) {
          const auto src = x.plane(n, c);
          double* dst = row + static_cast<std::size_t>(n) * hw;
          for (int i = 0; i < h; ++i) {
            const double* srow = src.data() + static_cast<std::size_t>(wrap(i + di - pad, h)) * w;
            double* drow = dst + static_cast<std::size_t>(i) * w;
            for (int j = 0; j < w; ++j) drow[j] = srow[wrap(j + dj - pad, w)];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const RowMatrix& cols, int k, Tensor& dx) {
  const int pad = (k - 1) / 2;
  const int n_batch = dx.batch(), c_in = dx.channels(), h = dx.height(), w = dx.width();
  const std::size_t hw = dx.plane_size();
  for (int c = 0; c < c_in; ++c) {
    for (int di = 0; di < k; ++di) {
      for (int dj = 0; dj < k; ++dj) {
        const Eigen::Index r = (static_cast<Eigen::Index>(c) * k + di) * k + dj;
        const double* row = cols.row(r).data();
        for (int n = 0; n < n_batch; ++n) {
          auto dst = dx.plane(n, c);
          const double* src = row + static_cast<std::size_t>(n) * hw;
          for (int i = 0; i < h; ++i) {
            double* drow = dst.data() + static_cast<std::size_t>(wrap(i + di - pad, h)) * w;
            const double* srow = src + static_cast<std::size_t>(i) * w;
            for (int j = 0; j < w; ++j) drow[wrap(j + dj - pad, w)] += srow[j];
          }
        }
      }
    }
  }
}

void fill_uniform(Parameter& p, Rng& rng, double bound) {
  for (double& v : p.value) v = rng.uniform(-bound, bound);
}

}  // namespace

Parameter make_parameter(std::string name, std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw GeometryError("parameter " + name + " has a non-positive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return Parameter{std::move(name), std::move(shape), std::vector<double>(n, 0.0)};
}

Gradients::Gradients(const ConstParameterList& params) {
  grads_.reserve(params.size());
  for (const Parameter* p : params) grads_.emplace_back(p->size(), 0.0);
}

void Gradients::zero() {
  for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0);
}

void Gradients::add(const Gradients& other) {
  if (other.grads_.size() != grads_.size()) throw GeometryError("gradient sets differ in length");
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    if (other.grads_[i].size() != grads_[i].size()) throw GeometryError("gradient shapes differ");
    for (std::size_t j = 0; j < grads_[i].size(); ++j) grads_[i][j] += other.grads_[i][j];
  }
}

void Gradients::scale(double s) {
  for (auto& g : grads_) {
    for (double& v : g) v *= s;
  }
}

double Gradients::norm() const {
  double s = 0.0;
  for (const auto& g : grads_) {
    for (double v : g) s += v * v;
  }
  return std::sqrt(s);
}

bool Gradients::all_finite() const {
  for (const auto& g : grads_) {
    for (double v : g) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

ConstParameterList Layer::parameters() const {
  ConstParameterList out;
  for (Parameter* p : const_cast<Layer*>(this)->parameters()) out.push_back(p);
  return out;
}

// ---- Conv2d -----------------------------------------------------------------

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, Rng& rng,
               Init init)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      weight_(make_parameter(name + ".weight", {out_channels, in_channels, kernel, kernel})),
      bias_(make_parameter(name + ".bias", {out_channels})) {
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("conv kernel must be odd and positive");
  if (init == Init::Default) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels) * kernel * kernel);
    fill_uniform(weight_, rng, bound);
    fill_uniform(bias_, rng, bound);
  }
}

Tensor Conv2d::forward(const Tensor& x, LayerCache* cache) const {
  require_channels(x, in_, weight_.name);
  const RowMatrix cols = im2col(x, kernel_);
  const Eigen::Map<const RowMatrix> w(weight_.value.data(), out_,
                                      static_cast<Eigen::Index>(in_) * kernel_ * kernel_);
  const RowMatrix y = w * cols;
  Tensor out(x.batch(), out_, x.height(), x.width());
  const std::size_t hw = x.plane_size();
  for (int n = 0; n < x.batch(); ++n) {
    for (int o = 0; o < out_; ++o) {
      auto dst = out.plane(n, o);
      const double* src = y.row(o).data() + static_cast<std::size_t>(n) * hw;
      const double b = bias_.value[static_cast<std::size_t>(o)];
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + b;
    }
  }
  if (cache) cache->input = x;
  return out;
}

Tensor Conv2d::backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const {
  require_grad_slots(grads, 2, weight_.name);
  const Tensor& x = cache.input;
  require_channels(dy, out_, weight_.name);
  const std::size_t hw = x.plane_size();
  RowMatrix dmat(out_, static_cast<Eigen::Index>(x.batch()) * static_cast<Eigen::Index>(hw));
  for (int o = 0; o < out_; ++o) {
    double* row = dmat.row(o).data();
    double bsum = 0.0;
    for (int n = 0; n < x.batch(); ++n) {
      const auto src = dy.plane(n, o);
      std::copy(src.begin(), src.end(), row + static_cast<std::size_t>(n) * hw);
      for (double v : src) bsum += v;
    }
    grads[1][static_cast<std::size_t>(o)] += bsum;
  }
  const RowMatrix cols = im2col(x, kernel_);
  const Eigen::Index k_rows = static_cast<Eigen::Index>(in_) * kernel_ * kernel_;
  Eigen::Map<RowMatrix> gw(grads[0].data(), out_, k_rows);
  gw.noalias() += dmat * cols.transpose();

  const Eigen::Map<const RowMatrix> w(weight_.value.data(), out_, k_rows);
  const RowMatrix dcols = w.transpose() * dmat;
  Tensor dx(x.batch(), in_, x.height(), x.width());
  col2im_add(dcols, kernel_, dx);
  return dx;
}

// ---- SpectralConv2d ---------------------------------------------------------

SpectralConv2d::SpectralConv2d(std::string name, int in_channels, int out_channels, int modes,
                               Rng& rng, Init init)
    : in_(in_channels), out_(out_channels), modes_(modes) {
  if (modes <= 0) throw ConfigError("spectral modes must be positive");
  const int r = (2 * modes - 1) * (2 * modes - 1);
  weight_ = make_parameter(name + ".weight", {in_channels, out_channels, r, 2});
  if (init == Init::Default) {
    const double scale = 1.0 / (static_cast<double>(in_channels) * out_channels);
    for (double& v : weight_.value) v = scale * rng.uniform();
  }
}

std::pair<int, int> SpectralConv2d::mode(int r) const {
  const int side = 2 * modes_ - 1;
  return {r / side - (modes_ - 1), r % side - (modes_ - 1)};
}

Tensor SpectralConv2d::forward(const Tensor& x, LayerCache* cache) const {
  require_channels(x, in_, weight_.name);
  const int h = x.height(), w = x.width();
  if (2 * modes_ > std::min(h, w)) {
    throw GeometryError(weight_.name + ": too many modes for a " + x.shape_string() + " input");
  }
  const int rn = retained();
  std::vector<std::size_t> idx(static_cast<std::size_t>(rn));
  for (int r = 0; r < rn; ++r) {
    const auto [ky, kx] = mode(r);
    idx[static_cast<std::size_t>(r)] = static_cast<std::size_t>(wrap(ky, h)) * w + wrap(kx, w);
  }
  const auto* wc = reinterpret_cast<const Complex*>(weight_.value.data());
  // Retained input coefficients, stored for the weight gradient as
  // [n, c, r, (re, im)].
  Tensor coeffs(x.batch(), in_, rn, 2);
  Tensor out(x.batch(), out_, h, w);
  std::vector<Complex> xr(static_cast<std::size_t>(in_) * rn);
  for (int n = 0; n < x.batch(); ++n) {
    for (int c = 0; c < in_; ++c) {
      const Spectrum s = fft2(x.plane(n, c), h, w);
      for (int r = 0; r < rn; ++r) {
        const Complex v = s[idx[static_cast<std::size_t>(r)]];
        xr[static_cast<std::size_t>(c) * rn + r] = v;
        coeffs.at(n, c, r, 0) = v.real();
        coeffs.at(n, c, r, 1) = v.imag();
      }
    }
    for (int o = 0; o < out_; ++o) {
      Spectrum s(static_cast<std::size_t>(h) * w, Complex(0.0, 0.0));
      for (int c = 0; c < in_; ++c) {
        const Complex* wrow = wc + (static_cast<std::size_t>(c) * out_ + o) * rn;
        const Complex* xrow = xr.data() + static_cast<std::size_t>(c) * rn;
        for (int r = 0; r < rn; ++r) s[idx[static_cast<std::size_t>(r)]] += wrow[r] * xrow[r];
      }
      ifft2_real(std::move(s), h, w, out.plane(n, o));
    }
  }
  if (cache) {
    cache->extra = {std::move(coeffs)};
  }
  return out;
}

Tensor SpectralConv2d::backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const {
  require_grad_slots(grads, 1, weight_.name);
  require_channels(dy, out_, weight_.name);
  if (cache.extra.size() != 1) throw DependencyError(weight_.name + ": backward without forward");
  const Tensor& coeffs = cache.extra[0];
  const int h = dy.height(), w = dy.width();
  const int rn = retained();
  const double inv_n = 1.0 / (static_cast<double>(h) * w);
  std::vector<std::size_t> idx(static_cast<std::size_t>(rn));
  for (int r = 0; r < rn; ++r) {
    const auto [ky, kx] = mode(r);
    idx[static_cast<std::size_t>(r)] = static_cast<std::size_t>(wrap(ky, h)) * w + wrap(kx, w);
  }
  const auto* wc = reinterpret_cast<const Complex*>(weight_.value.data());
  auto* gw = reinterpret_cast<Complex*>(grads[0].data());
  Tensor dx(dy.batch(), in_, h, w);
  std::vector<Complex> g(static_cast<std::size_t>(out_) * rn);
  for (int n = 0; n < dy.batch(); ++n) {
    for (int o = 0; o < out_; ++o) {
      const Spectrum s = fft2(dy.plane(n, o), h, w);
      for (int r = 0; r < rn; ++r) {
        g[static_cast<std::size_t>(o) * rn + r] = s[idx[static_cast<std::size_t>(r)]] * inv_n;
      }
    }
    for (int c = 0; c < in_; ++c) {
      Spectrum z(static_cast<std::size_t>(h) * w, Complex(0.0, 0.0));
      for (int o = 0; o < out_; ++o) {
        const std::size_t base = (static_cast<std::size_t>(c) * out_ + o) * rn;
        const Complex* grow = g.data() + static_cast<std::size_t>(o) * rn;
        for (int r = 0; r < rn; ++r) {
          const Complex xv(coeffs.at(n, c, r, 0), coeffs.at(n, c, r, 1));
          gw[base + r] += std::conj(xv) * grow[r];
          z[idx[static_cast<std::size_t>(r)]] += std::conj(wc[base + r]) * grow[r];
        }
      }
      ifft2_unnormalized_inplace(z, h, w);
      auto dst = dx.plane(n, c);
      for (std::size_t p = 0; p < dst.size(); ++p) dst[p] = z[p].real();
    }
  }
  return dx;
}

// ---- GELU -------------------------------------------------------------------

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Tensor Gelu::forward(const Tensor& x, LayerCache* cache) const {
  Tensor y = x;
  for (double& v : y.storage()) v = gelu(v);
  if (cache) cache->input = x;
  return y;
}

Tensor Gelu::backward(const Tensor& dy, const LayerCache& cache, GradSlice) const {
  require_same_shape(dy, cache.input, "gelu backward");
  Tensor dx = dy;
  const auto& x = cache.input.storage();
  for (std::size_t i = 0; i < x.size(); ++i) dx.storage()[i] *= gelu_derivative(x[i]);
  return dx;
}

// ---- ChannelNorm ------------------------------------------------------------

ChannelNorm::ChannelNorm(std::string name, int channels, double eps)
    : channels_(channels),
      eps_(eps),
      gamma_(make_parameter(name + ".gamma", {channels})),
      beta_(make_parameter(name + ".beta", {channels})) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
}

Tensor ChannelNorm::forward(const Tensor& x, LayerCache* cache) const {
  require_channels(x, channels_, gamma_.name);
  const std::size_t hw = x.plane_size();
  Tensor y(x.batch(), channels_, x.height(), x.width());
  Tensor xhat(x.batch(), channels_, x.height(), x.width());
  Tensor inv_std(x.batch(), 1, x.height(), x.width());
  for (int n = 0; n < x.batch(); ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      double mu = 0.0;
      for (int c = 0; c < channels_; ++c) mu += x.plane(n, c)[p];
      mu /= channels_;
      double var = 0.0;
      for (int c = 0; c < channels_; ++c) {
        const double d = x.plane(n, c)[p] - mu;
        var += d * d;
      }
      var /= channels_;
      const double is = 1.0 / std::sqrt(var + eps_);
      inv_std.plane(n, 0)[p] = is;
      for (int c = 0; c < channels_; ++c) {
        const double xh = (x.plane(n, c)[p] - mu) * is;
        xhat.plane(n, c)[p] = xh;
        y.plane(n, c)[p] = gamma_.value[static_cast<std::size_t>(c)] * xh +
                           beta_.value[static_cast<std::size_t>(c)];
      }
    }
  }
  if (cache) {
    cache->input = std::move(xhat);
    cache->extra = {std::move(inv_std)};
  }
  return y;
}

Tensor ChannelNorm::backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const {
  require_grad_slots(grads, 2, gamma_.name);
  const Tensor& xhat = cache.input;
  const Tensor& inv_std = cache.extra.at(0);
  require_same_shape(dy, xhat, "channel norm backward");
  const std::size_t hw = dy.plane_size();
  Tensor dx(dy.batch(), channels_, dy.height(), dy.width());
  std::vector<double> dxh(static_cast<std::size_t>(channels_));
  for (int n = 0; n < dy.batch(); ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      double m1 = 0.0, m2 = 0.0;
      for (int c = 0; c < channels_; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        const double g = dy.plane(n, c)[p];
        const double xh = xhat.plane(n, c)[p];
        grads[0][cc] += g * xh;
        grads[1][cc] += g;
        dxh[cc] = g * gamma_.value[cc];
        m1 += dxh[cc];
        m2 += dxh[cc] * xh;
      }
      m1 /= channels_;
      m2 /= channels_;
      const double is = inv_std.plane(n, 0)[p];
      for (int c = 0; c < channels_; ++c) {
        dx.plane(n, c)[p] = is * (dxh[static_cast<std::size_t>(c)] - m1 - xhat.plane(n, c)[p] * m2);
      }
    }
  }
  return dx;
}

// ---- FourierBlock -----------------------------------------------------------

FourierBlock::FourierBlock(std::string name, int width, int modes, Rng& rng)
    : spectral_(name + ".spectral", width, width, modes, rng),
      skip_(name + ".skip", width, width, 1, rng) {}

ParameterList FourierBlock::parameters() {
  return {&spectral_.weight(), &skip_.weight(), &skip_.bias()};
}

Tensor FourierBlock::forward(const Tensor& x, LayerCache* cache) const {
  LayerCache spec_cache, skip_cache;
  Tensor pre = spectral_.forward(x, cache ? &spec_cache : nullptr);
  axpy(pre, skip_.forward(x, cache ? &skip_cache : nullptr));
  Tensor y = pre;
  for (double& v : y.storage()) v = gelu(v);
  if (cache) {
    cache->input = x;
    cache->extra = {std::move(pre), std::move(spec_cache.extra.at(0))};
  }
  return y;
}

Tensor FourierBlock::backward(const Tensor& dy, const LayerCache& cache, GradSlice grads) const {
  require_grad_slots(grads, 3, "fourier block");
  const Tensor& pre = cache.extra.at(0);
  Tensor dpre = dy;
  for (std::size_t i = 0; i < pre.size(); ++i) dpre.storage()[i] *= gelu_derivative(pre.storage()[i]);
  LayerCache spec_cache;
  spec_cache.extra = {cache.extra.at(1)};
  LayerCache skip_cache;
  skip_cache.input = cache.input;
  Tensor dx = spectral_.backward(dpre, spec_cache, grads.subspan(0, 1));
  axpy(dx, skip_.backward(dpre, skip_cache, grads.subspan(1, 2)));
  return dx;
}

// ---- Sequential -------------------------------------------------------------

Sequential::Sequential(const Sequential& other) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    std::vector<std::unique_ptr<Layer>> copy;
    for (const auto& l : other.layers_) copy.push_back(l->clone());
    layers_ = std::move(copy);
  }
  return *this;
}

void Sequential::add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

Tensor Sequential::forward(const Tensor& x, Cache* cache) const {
  if (cache) cache->layers.assign(layers_.size(), LayerCache{});
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h, cache ? &cache->layers[i] : nullptr);
  }
  return h;
}

Tensor Sequential::backward(const Tensor& dy, const Cache& cache, Gradients& grads) const {
  if (cache.layers.size() != layers_.size()) throw DependencyError("backward without forward");
  std::vector<std::size_t> offsets(layers_.size() + 1, 0);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    offsets[i + 1] = offsets[i] + static_cast<const Layer&>(*layers_[i]).parameters().size();
  }
  if (grads.count() != offsets.back()) throw GeometryError("gradient set does not match model");
  Tensor g = dy;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    g = layers_[i]->backward(g, cache.layers[i], grads.slice(offsets[i], offsets[i + 1] - offsets[i]));
  }
  return g;
}

ParameterList Sequential::parameters() {
  ParameterList out;
  for (auto& l : layers_) {
    for (Parameter* p : l->parameters()) out.push_back(p);
  }
  return out;
}

ConstParameterList Sequential::parameters() const {
  ConstParameterList out;
  for (const auto& l : layers_) {
    for (const Parameter* p : static_cast<const Layer&>(*l).parameters()) out.push_back(p);
  }
  return out;
}

std::size_t Sequential::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->size();
  return n;
}

std::vector<std::vector<double>> snapshot(const ConstParameterList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

void restore(const ParameterList& params, const std::vector<std::vector<double>>& values) {
  if (values.size() != params.size()) throw GeometryError("snapshot does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].size() != params[i]->size()) throw GeometryError("snapshot shape mismatch");
    params[i]->value = values[i];
  }
}

// ---- Optimizer --------------------------------------------------------------

AdamW::AdamW(const ConstParameterList& params, AdamWConfig cfg) : cfg_(cfg) {
  for (const Parameter* p : params) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void AdamW::step(const ParameterList& params, const Gradients& grads, double lr) {
  if (params.size() != m_.size() || grads.count() != m_.size()) {
    throw GeometryError("optimizer state does not match parameters");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i]->value;
    const auto& g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      value[j] = value[j] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamW::set_state(long t, std::vector<std::vector<double>> m,
                      std::vector<std::vector<double>> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    throw GeometryError("optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size()) {
      throw GeometryError("optimizer moment shape mismatch");
    }
  }
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

double clip_grad_norm(Gradients& grads, double max_norm) {
  const double norm = grads.norm();
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double s = max_norm / norm;
  grads.scale(s);
  return s;
}

// ---- Serialization ----------------------------------------------------------

namespace {

constexpr std::uint32_t kBlobMagic = 0x4b435248;  // "HRCK" little-endian

static_assert(std::endian::native == std::endian::little, "blob format assumes little-endian");

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw ConfigError("truncated tensor blob");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string encode_blob(const ConstParameterList& tensors) {
  std::string buf;
  put<std::uint32_t>(buf, kBlobMagic);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const Parameter* p : tensors) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p->name.size()));
    buf.append(p->name);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p->shape.size()));
    for (int d : p->shape) put<std::int32_t>(buf, d);
    put<std::uint64_t>(buf, p->value.size());
    buf.append(reinterpret_cast<const char*>(p->value.data()), p->value.size() * sizeof(double));
  }
  return buf;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return std::filesystem::path(base.string() + suffix);
}

}  // namespace

std::string parameter_checksum(const ConstParameterList& params) {
  return content_hash(encode_blob(params));
}

void write_tensor_blob(const std::filesystem::path& path, const ConstParameterList& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string buf = encode_blob(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ConfigError("write failed for " + path.string());
}

std::vector<Parameter> read_tensor_blob(const std::filesystem::path& path) {
  const std::string buf = slurp(path);
  std::size_t pos = 0;
  if (take<std::uint32_t>(buf, pos) != kBlobMagic) {
    throw ConfigError(path.string() + " is not a tensor blob");
  }
  const auto count = take<std::uint32_t>(buf, pos);
  std::vector<Parameter> out;
  out.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    Parameter p;
    const auto name_len = take<std::uint32_t>(buf, pos);
    if (pos + name_len > buf.size()) throw ConfigError("truncated tensor blob");
    p.name = buf.substr(pos, name_len);
    pos += name_len;
    const auto ndim = take<std::uint32_t>(buf, pos);
    std::size_t expect = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      p.shape.push_back(take<std::int32_t>(buf, pos));
      expect *= static_cast<std::size_t>(p.shape.back());
    }
    const auto n = take<std::uint64_t>(buf, pos);
    if (n != expect) throw ConfigError("tensor " + p.name + ": size disagrees with shape");
    if (pos + n * sizeof(double) > buf.size()) throw ConfigError("truncated tensor blob");
    p.value.resize(n);
    std::memcpy(p.value.data(), buf.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    out.push_back(std::move(p));
  }
  if (pos != buf.size()) throw ConfigError("trailing bytes in tensor blob");
  return out;
}

void save_checkpoint(const std::filesystem::path& base, const ConstParameterList& params,
                     const nlohmann::json& manifest) {
  const auto bin = with_suffix(base, ".bin");
  write_tensor_blob(bin, params);
  nlohmann::json m = manifest;
  m["format"] = "haloroute-checkpoint-v1";
  m["blob"] = bin.filename().string();
  m["blob_hash"] = file_content_hash(bin);
  m["parameter_checksum"] = parameter_checksum(params);
  nlohmann::json tensors = nlohmann::json::array();
  for (const Parameter* p : params) tensors.push_back({{"name", p->name}, {"shape", p->shape}});
  m["tensors"] = tensors;
  std::ofstream out(with_suffix(base, ".json"), std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint manifest for " + base.string());
  out << m.dump(2) << '\n';
}

nlohmann::json load_checkpoint(const std::filesystem::path& base, const ParameterList& params) {
  const auto json_path = with_suffix(base, ".json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(slurp(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad checkpoint manifest " + json_path.string() + ": " + e.what());
  }
  const auto bin = with_suffix(base, ".bin");
  if (manifest.contains("blob_hash") && manifest["blob_hash"] != file_content_hash(bin)) {
    throw ConfigError("checkpoint blob hash mismatch for " + bin.string());
  }
  const auto tensors = read_tensor_blob(bin);
  if (tensors.size() != params.size()) {
    throw ConfigError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].name != params[i]->name || tensors[i].shape != params[i]->shape) {
      throw ConfigError("checkpoint tensor " + tensors[i].name + " does not match " +
                        params[i]->name);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = tensors[i].value;
  return manifest;
}

}  // namespace haloroute::nn
