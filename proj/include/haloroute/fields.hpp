#pragma once

// Grid, field and block-geometry primitives.
//
// A state field is a [4, H, W] tensor on the periodic square [0, 2*pi)^2
// with channels (u, v, s1, s2). Rows index y, columns index x. Corrections
// only ever touch the two velocity channels.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "haloroute/tensor.hpp"

namespace haloroute {

inline constexpr int kStateChannels = 4;
inline constexpr int kVelocityChannels = 2;
inline constexpr int kWindowChannels = 2 * kStateChannels;

/// Throws GeometryError unless t is a single [4, H, W] state field.
void require_state_field(const Tensor& t, const char* what);

/// Channels 0-1 of a state field.
Tensor project_uv(const Tensor& f);

/// Copy of `f` with its velocity channels replaced by `uv`.
Tensor embed_uv(const Tensor& uv, const Tensor& f);

struct BlockOrigin {
  int row = 0;
  int col = 0;
};

/// Non-overlapping b x b center blocks tiling an H x W grid, each read
/// with a halo of width h. Blocks are numbered row-major.
struct BlockPartition {
  int height = 0;
  int width = 0;
  int block = 0;
  int halo = 0;
  int blocks_y = 0;
  int blocks_x = 0;

  int count() const { return blocks_y * blocks_x; }
  int window() const { return block + 2 * halo; }
  BlockOrigin origin(int block_idx) const;
  /// Block index containing pixel (i, j).
  int block_of(int i, int j) const { return (i / block) * blocks_x + (j / block); }

  friend bool operator==(const BlockPartition&, const BlockPartition&) = default;
};

BlockPartition make_partition(int height, int width, int block, int halo);

/// [C, b+2h, b+2h] window around block `block_idx`, wrapping periodically.
Tensor halo_extract(const Tensor& f, const BlockPartition& p, int block_idx);

/// Writes the halo window of block `block_idx` of the channel-stacked pair
/// (x_t, x_g) into sample `n` of `out` ([N, 8, S, S]).
void halo_extract_pair_into(const Tensor& x_t, const Tensor& x_g, const BlockPartition& p,
                            int block_idx, Tensor& out, int n);

/// Adjoint of halo_extract_pair_into: scatter-adds the window gradient of
/// sample `n` back onto the two source fields (with periodic wrap).
void halo_scatter_pair_add(const Tensor& grad_windows, int n, const BlockPartition& p,
                           int block_idx, Tensor& grad_x_t, Tensor& grad_x_g);

/// Drops `h` pixels from every side of the spatial axes.
Tensor center_crop(const Tensor& w, int h);

/// Separable taper used when writing a block residual.
struct HannWindow {
  int side = 0;
  std::vector<double> profile;  // 1-D profile, length side
  std::vector<double> values;   // side * side, row-major outer product

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * side + j]; }
};

/// Half-sample-offset Hann taper w(n) = 0.5 (1 - cos(2 pi (n + 0.5) / b)),
/// strictly positive so every pixel stays correctable.
HannWindow hann_window(int b);

/// All-ones window of side b (the taper ablation).
HannWindow flat_window(int b);

/// Adds win * delta ([2, b, b]) onto the velocity channels of block
/// `block_idx` of `x`, in place. Nothing else is touched.
void add_block_residual(Tensor& x, const BlockPartition& p, int block_idx, const Tensor& delta,
                        const HannWindow& win);

/// Functional form of add_block_residual.
Tensor apply_block_residual(const Tensor& xg, const BlockPartition& p, int block_idx,
                            const Tensor& delta, const HannWindow& win);

/// Per-block arithmetic mean of a single-channel map, row-major block order.
std::vector<double> block_mean_map(const Tensor& r, const BlockPartition& p);

/// Spatial grid coordinate of row i / column j on [0, 2 pi).
double grid_coordinate(int index, int n);

// Binary field format: 16-byte little-endian header (magic "HRF1", C, H, W
// as int32) followed by C*H*W float64 values, row-major. A trajectory file
// is a plain concatenation of such records.
inline constexpr std::uint32_t kFieldMagic = 0x31465248u;  // "HRF1"

void write_field(std::ostream& os, const Tensor& f);
Tensor read_field(std::istream& is);
void write_field_file(const std::filesystem::path& path, const Tensor& f);
Tensor read_field_file(const std::filesystem::path& path);
void write_field_sequence(const std::filesystem::path& path, std::span<const Tensor> frames);
std::vector<Tensor> read_field_sequence(const std::filesystem::path& path);

}  // namespace haloroute
