#pragma once

#include "fruitreid/cloud.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

namespace fruitreid {

/// Integer voxel coordinate in base-voxel units. At stride level s every
/// component is a multiple of s. `batch` separates independent clouds that
/// share one tensor.
struct VoxelCoord {
  std::int32_t i = 0, j = 0, k = 0;
  std::int32_t batch = 0;

  friend bool operator==(const VoxelCoord&, const VoxelCoord&) = default;
  friend auto operator<=>(const VoxelCoord&, const VoxelCoord&) = default;
};

struct VoxelCoordHash {
  std::size_t operator()(const VoxelCoord& c) const noexcept {
    std::uint64_t h = static_cast<std::uint32_t>(c.i);
    h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint32_t>(c.j);
    h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint32_t>(c.k);
    h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint32_t>(c.batch);
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

using FeatureRows = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Occupied voxel coordinates and one feature row per coordinate.
struct SparseVoxelTensor {
  std::vector<VoxelCoord> coords;
  FeatureRows features;
  double voxel_size = 1.0;
  int stride = 1;

  std::size_t size() const { return coords.size(); }
  /// Coordinate -> row lookup.
  std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> index() const;
};

struct VoxelMap {
  std::vector<std::int32_t> point_to_voxel;
  std::vector<std::vector<std::uint32_t>> voxel_to_points;
};

/// floor(p / v) quantization; voxel order is order of first occurrence.
/// Features are the mean RGB of member points.
std::pair<SparseVoxelTensor, VoxelMap> voxelize(const ColoredCloud& cloud, double voxel_size,
                                                std::int32_t batch = 0);

/// Concatenates several clouds into one tensor, each under its own batch id.
std::pair<SparseVoxelTensor, std::vector<VoxelMap>> voxelize_batch(
    std::span<const ColoredCloud> clouds, double voxel_size);

/// Points within distance s of `center`, re-expressed relative to it.
ColoredCloud support(const ColoredCloud& cloud, const Vec3& center, double radius);

/// One occupied (input, output) pair for a fixed kernel offset.
struct NeighborPair {
  std::int32_t input = 0;
  std::int32_t output = 0;
};

/// Kernel neighborhood of a sparse convolution. Offsets are enumerated
/// lexicographically (dx outermost, each in [-r, r]); `by_offset[o]` lists
/// the occupied pairs for offset o.
struct KernelMap {
  int kernel = 1;
  int in_stride = 1;
  int out_stride = 1;
  std::vector<VoxelCoord> out_coords;
  std::vector<std::array<int, 3>> offsets;
  std::vector<std::vector<NeighborPair>> by_offset;

  std::size_t volume() const { return offsets.size(); }
  std::size_t out_size() const { return out_coords.size(); }

  /// (offset index, input row) pairs seen by every output, in offset order.
  std::vector<std::vector<std::pair<int, std::int32_t>>> per_output() const;
};

/// Stride 1 keeps the input coordinates; stride 2 maps each input to
/// floor(c / 2s) * 2s at the doubled stride level. The kernel footprint
/// around output o covers o + d * in_stride for d in [-r, r]^3.
KernelMap kernel_neighbors(std::span<const VoxelCoord> coords, int in_stride, int kernel,
                           int stride);

inline KernelMap kernel_neighbors(const SparseVoxelTensor& tensor, int kernel, int stride) {
  return kernel_neighbors(tensor.coords, tensor.stride, kernel, stride);
}

/// Parent row at the coarser level for every fine coordinate.
std::vector<std::int32_t> parent_indices(std::span<const VoxelCoord> fine, int fine_stride,
                                         std::span<const VoxelCoord> coarse);

VoxelCoord downsample_coord(const VoxelCoord& c, int fine_stride);

}  // namespace fruitreid
