#include "haloroute/fields.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

namespace haloroute {
namespace {

int wrap(int i, int n) {
  const int r = i % n;
  return r < 0 ? r + n : r;
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("truncated field record");
  return to_little(v);
}

}  // namespace

void require_state_field(const Tensor& t, const char* what) {
  if (t.batch() != 1 || t.channels() != kStateChannels) {
    throw GeometryError(std::string(what) + ": expected a [1,4,H,W] state field, got " +
                        t.shape_string());
  }
}

Tensor project_uv(const Tensor& f) {
  if (f.batch() != 1 || f.channels() < kVelocityChannels) {
    throw GeometryError("project_uv: field needs at least two channels");
  }
  Tensor out(kVelocityChannels, f.height(), f.width());
  for (int c = 0; c < kVelocityChannels; ++c) {
    std::ranges::copy(f.plane(c), out.plane(c).begin());
  }
  return out;
}

Tensor embed_uv(const Tensor& uv, const Tensor& f) {
  if (uv.channels() != kVelocityChannels || uv.height() != f.height() || uv.width() != f.width()) {
    throw GeometryError("embed_uv: velocity tensor does not match field grid");
  }
  Tensor out = f;
  for (int c = 0; c < kVelocityChannels; ++c) {
    std::ranges::copy(uv.plane(c), out.plane(c).begin());
  }
  return out;
}

BlockOrigin BlockPartition::origin(int block_idx) const {
  if (block_idx < 0 || block_idx >= count()) {
    throw GeometryError("block index " + std::to_string(block_idx) + " out of range [0," +
                        std::to_string(count()) + ")");
  }
  return {(block_idx / blocks_x) * block, (block_idx % blocks_x) * block};
}

BlockPartition make_partition(int height, int width, int block, int halo) {
  if (height <= 0 || width <= 0 || block <= 0) {
    throw GeometryError("partition dimensions must be positive");
  }
  if (height % block != 0 || width % block != 0) {
    throw GeometryError("block edge " + std::to_string(block) + " does not divide grid " +
                        std::to_string(height) + "x" + std::to_string(width));
  }
  if (halo <= 0 || halo >= block) {
    throw GeometryError("degenerate halo: need 0 < h < b, got h=" + std::to_string(halo) +
                        " b=" + std::to_string(block));
  }
  BlockPartition p;
  p.height = height;
  p.width = width;
  p.block = block;
  p.halo = halo;
  p.blocks_y = height / block;
  p.blocks_x = width / block;
  return p;
}

Tensor halo_extract(const Tensor& f, const BlockPartition& p, int block_idx) {
  if (f.batch() != 1 || f.height() != p.height || f.width() != p.width) {
    throw GeometryError("halo_extract: field " + f.shape_string() + " does not match partition");
  }
  const auto o = p.origin(block_idx);
  const int side = p.window();
  Tensor out(f.channels(), side, side);
  for (int c = 0; c < f.channels(); ++c) {
    for (int i = 0; i < side; ++i) {
      const int si = wrap(o.row - p.halo + i, p.height);
      for (int j = 0; j < side; ++j) {
        out.at(c, i, j) = f.at(c, si, wrap(o.col - p.halo + j, p.width));
      }
    }
  }
  return out;
}

void halo_extract_pair_into(const Tensor& x_t, const Tensor& x_g, const BlockPartition& p,
                            int block_idx, Tensor& out, int n) {
  require_state_field(x_t, "halo_extract_pair");
  require_state_field(x_g, "halo_extract_pair");
  const int side = p.window();
  if (out.channels() != kWindowChannels || out.height() != side || out.width() != side ||
      n >= out.batch()) {
    throw GeometryError("halo_extract_pair: window buffer " + out.shape_string() + " mismatch");
  }
  const auto o = p.origin(block_idx);
  for (int c = 0; c < kWindowChannels; ++c) {
    const Tensor& src = c < kStateChannels ? x_t : x_g;
    const int sc = c % kStateChannels;
    for (int i = 0; i < side; ++i) {
      const int si = wrap(o.row - p.halo + i, p.height);
      for (int j = 0; j < side; ++j) {
        out.at(n, c, i, j) = src.at(sc, si, wrap(o.col - p.halo + j, p.width));
      }
    }
  }
}

void halo_scatter_pair_add(const Tensor& grad_windows, int n, const BlockPartition& p,
                           int block_idx, Tensor& grad_x_t, Tensor& grad_x_g) {
  const int side = p.window();
  const auto o = p.origin(block_idx);
  for (int c = 0; c < kWindowChannels; ++c) {
    Tensor& dst = c < kStateChannels ? grad_x_t : grad_x_g;
    const int sc = c % kStateChannels;
    for (int i = 0; i < side; ++i) {
      const int si = wrap(o.row - p.halo + i, p.height);
      for (int j = 0; j < side; ++j) {
        dst.at(sc, si, wrap(o.col - p.halo + j, p.width)) += grad_windows.at(n, c, i, j);
      }
    }
  }
}

Tensor center_crop(const Tensor& w, int h) {
  if (h < 0 || w.height() < 2 * h + 1 || w.width() < 2 * h + 1) {
    throw GeometryError("center_crop: window " + w.shape_string() + " too small for halo " +
                        std::to_string(h));
  }
  Tensor out(w.batch(), w.channels(), w.height() - 2 * h, w.width() - 2 * h);
  for (int n = 0; n < w.batch(); ++n) {
    for (int c = 0; c < w.channels(); ++c) {
      for (int i = 0; i < out.height(); ++i) {
        for (int j = 0; j < out.width(); ++j) out.at(n, c, i, j) = w.at(n, c, i + h, j + h);
      }
    }
  }
  return out;
}

HannWindow hann_window(int b) {
  if (b < 2) throw GeometryError("hann_window: side must be >= 2");
  HannWindow win;
  win.side = b;
  win.profile.resize(static_cast<std::size_t>(b));
  for (int n = 0; n < b; ++n) {
    win.profile[static_cast<std::size_t>(n)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * (n + 0.5) / b));
  }
  win.values.resize(static_cast<std::size_t>(b) * b);
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < b; ++j) {
      win.values[static_cast<std::size_t>(i) * b + j] = win.profile[i] * win.profile[j];
    }
  }
  return win;
}

HannWindow flat_window(int b) {
  if (b < 1) throw GeometryError("flat_window: side must be positive");
  HannWindow win;
  win.side = b;
  win.profile.assign(static_cast<std::size_t>(b), 1.0);
  win.values.assign(static_cast<std::size_t>(b) * b, 1.0);
  return win;
}

void add_block_residual(Tensor& x, const BlockPartition& p, int block_idx, const Tensor& delta,
                        const HannWindow& win) {
  require_state_field(x, "apply_block_residual");
  if (delta.channels() != kVelocityChannels || delta.height() != p.block ||
      delta.width() != p.block || win.side != p.block) {
    throw GeometryError("apply_block_residual: residual " + delta.shape_string() +
                        " does not match block " + std::to_string(p.block));
  }
  const auto o = p.origin(block_idx);
  for (int c = 0; c < kVelocityChannels; ++c) {
    for (int i = 0; i < p.block; ++i) {
      for (int j = 0; j < p.block; ++j) {
        x.at(c, o.row + i, o.col + j) += win.at(i, j) * delta.at(c, i, j);
      }
    }
  }
}

Tensor apply_block_residual(const Tensor& xg, const BlockPartition& p, int block_idx,
                            const Tensor& delta, const HannWindow& win) {
  if (!delta.all_finite()) throw NumericError("apply_block_residual: non-finite residual");
  Tensor out = xg;
  add_block_residual(out, p, block_idx, delta, win);
  return out;
}

std::vector<double> block_mean_map(const Tensor& r, const BlockPartition& p) {
  if (r.channels() != 1 || r.height() != p.height || r.width() != p.width) {
    throw GeometryError("block_mean_map: map " + r.shape_string() + " does not match partition");
  }
  std::vector<double> scores(static_cast<std::size_t>(p.count()), 0.0);
  const double inv = 1.0 / (static_cast<double>(p.block) * p.block);
  for (int b = 0; b < p.count(); ++b) {
    const auto o = p.origin(b);
    double s = 0.0;
    for (int i = 0; i < p.block; ++i) {
      for (int j = 0; j < p.block; ++j) s += r.at(0, o.row + i, o.col + j);
    }
    scores[static_cast<std::size_t>(b)] = s * inv;
  }
  return scores;
}

double grid_coordinate(int index, int n) { return 2.0 * std::numbers::pi * index / n; }

void write_field(std::ostream& os, const Tensor& f) {
  if (f.batch() != 1) throw GeometryError("write_field: batched tensors are not fields");
  put<std::uint32_t>(os, kFieldMagic);
  put<std::int32_t>(os, f.channels());
  put<std::int32_t>(os, f.height());
  put<std::int32_t>(os, f.width());
  for (double v : f.storage()) put<double>(os, v);
}

Tensor read_field(std::istream& is) {
  if (get<std::uint32_t>(is) != kFieldMagic) throw ConfigError("bad field magic");
  const int c = get<std::int32_t>(is);
  const int h = get<std::int32_t>(is);
  const int w = get<std::int32_t>(is);
  if (c <= 0 || h <= 0 || w <= 0) throw ConfigError("bad field dimensions");
  Tensor f(c, h, w);
  for (double& v : f.storage()) v = get<double>(is);
  return f;
}

void write_field_file(const std::filesystem::path& path, const Tensor& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
  write_field(os, f);
}

Tensor read_field_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  return read_field(is);
}

void write_field_sequence(const std::filesystem::path& path, std::span<const Tensor> frames) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path.string() + " for writing");
  for (const auto& f : frames) write_field(os, f);
}

std::vector<Tensor> read_field_sequence(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  std::vector<Tensor> frames;
  while (is.peek() != std::char_traits<char>::eof()) frames.push_back(read_field(is));
  return frames;
}

}  // namespace haloroute
