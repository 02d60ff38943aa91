#include "fruitreid/sparsegrid.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace fruitreid {

namespace {

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int32_t quantize(double x, double v) {
  const double q = std::floor(x / v);
  if (!(q > std::numeric_limits<std::int32_t>::min() / 4 && q < std::numeric_limits<std::int32_t>::max() / 4)) {
    throw ValidationError("coordinate " + std::to_string(x) + " out of voxel grid range");
  }
  return static_cast<std::int32_t>(q);
}

void append_voxels(const ColoredCloud& cloud, double voxel_size, std::int32_t batch,
                   std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash>& lookup,
                   std::vector<VoxelCoord>& coords, std::vector<Vec3>& color_sums,
                   VoxelMap& map) {
  map.point_to_voxel.resize(cloud.size());
  const auto base = static_cast<std::int32_t>(coords.size());
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    const Vec3& x = cloud.points[p];
    VoxelCoord c{quantize(x.x(), voxel_size), quantize(x.y(), voxel_size),
                 quantize(x.z(), voxel_size), batch};
    auto [it, inserted] = lookup.try_emplace(c, static_cast<std::int32_t>(coords.size()));
    if (inserted) {
      coords.push_back(c);
      color_sums.push_back(Vec3::Zero());
      map.voxel_to_points.emplace_back();
    }
    const std::int32_t v = it->second;
    color_sums[static_cast<std::size_t>(v)] += cloud.colors[p];
    map.point_to_voxel[p] = v - base;
    map.voxel_to_points[static_cast<std::size_t>(v - base)].push_back(static_cast<std::uint32_t>(p));
  }
}

}  // namespace

std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> SparseVoxelTensor::index() const {
  std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> out;
  out.reserve(coords.size() * 2);
  for (std::size_t r = 0; r < coords.size(); ++r) out.emplace(coords[r], static_cast<std::int32_t>(r));
  return out;
}

std::pair<SparseVoxelTensor, VoxelMap> voxelize(const ColoredCloud& cloud, double voxel_size,
                                                std::int32_t batch) {
  if (!(voxel_size > 0.0)) throw ConfigError("voxel size must be positive");
  std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> lookup;
  lookup.reserve(cloud.size() * 2);
  std::vector<VoxelCoord> coords;
  std::vector<Vec3> sums;
  VoxelMap map;
  append_voxels(cloud, voxel_size, batch, lookup, coords, sums, map);

  SparseVoxelTensor t;
  t.voxel_size = voxel_size;
  t.stride = 1;
  t.coords = std::move(coords);
  t.features.resize(static_cast<Eigen::Index>(t.coords.size()), 3);
  for (std::size_t v = 0; v < t.coords.size(); ++v) {
    const double n = static_cast<double>(map.voxel_to_points[v].size());
    t.features.row(static_cast<Eigen::Index>(v)) = (sums[v] / n).transpose();
  }
  return {std::move(t), std::move(map)};
}

std::pair<SparseVoxelTensor, std::vector<VoxelMap>> voxelize_batch(
    std::span<const ColoredCloud> clouds, double voxel_size) {
  if (!(voxel_size > 0.0)) throw ConfigError("voxel size must be positive");
  std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> lookup;
  std::vector<VoxelCoord> coords;
  std::vector<Vec3> sums;
  std::vector<VoxelMap> maps(clouds.size());
  std::vector<std::size_t> first(clouds.size() + 1, 0);
  for (std::size_t b = 0; b < clouds.size(); ++b) {
    first[b] = coords.size();
    append_voxels(clouds[b], voxel_size, static_cast<std::int32_t>(b), lookup, coords, sums, maps[b]);
  }
  first[clouds.size()] = coords.size();

  SparseVoxelTensor t;
  t.voxel_size = voxel_size;
  t.coords = std::move(coords);
  t.features.resize(static_cast<Eigen::Index>(t.coords.size()), 3);
  for (std::size_t b = 0; b < clouds.size(); ++b) {
    for (std::size_t v = first[b]; v < first[b + 1]; ++v) {
      const double n = static_cast<double>(maps[b].voxel_to_points[v - first[b]].size());
      t.features.row(static_cast<Eigen::Index>(v)) = (sums[v] / n).transpose();
    }
  }
  return {std::move(t), std::move(maps)};
}

ColoredCloud support(const ColoredCloud& cloud, const Vec3& center, double radius) {
  if (!(radius > 0.0)) throw ConfigError("support radius must be positive");
  ColoredCloud out;
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 d = cloud.points[i] - center;
    if (d.squaredNorm() <= r2) out.push_back(d, cloud.colors[i]);
  }
  return out;
}

VoxelCoord downsample_coord(const VoxelCoord& c, int fine_stride) {
  const std::int32_t s2 = 2 * fine_stride;
  return {floor_div(c.i, s2) * s2, floor_div(c.j, s2) * s2, floor_div(c.k, s2) * s2, c.batch};
}

KernelMap kernel_neighbors(std::span<const VoxelCoord> coords, int in_stride, int kernel,
                           int stride) {
  if (kernel != 1 && kernel != 3) throw ConfigError("kernel must be 1 or 3");
  if (stride != 1 && stride != 2) throw ConfigError("stride must be 1 or 2");
  if (in_stride <= 0) throw ConfigError("input stride must be positive");

  KernelMap km;
  km.kernel = kernel;
  km.in_stride = in_stride;
  km.out_stride = in_stride * stride;
  const int r = kernel / 2;
  for (int dx = -r; dx <= r; ++dx)
    for (int dy = -r; dy <= r; ++dy)
      for (int dz = -r; dz <= r; ++dz) km.offsets.push_back({dx, dy, dz});

  std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> in_index;
  in_index.reserve(coords.size() * 2);
  for (std::size_t n = 0; n < coords.size(); ++n) in_index.emplace(coords[n], static_cast<std::int32_t>(n));

  if (stride == 1) {
    km.out_coords.assign(coords.begin(), coords.end());
  } else {
    std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> seen;
    seen.reserve(coords.size());
    for (const auto& c : coords) {
      const VoxelCoord d = downsample_coord(c, in_stride);
      if (seen.try_emplace(d, static_cast<std::int32_t>(km.out_coords.size())).second) {
        km.out_coords.push_back(d);
      }
    }
  }

  km.by_offset.resize(km.offsets.size());
  for (std::size_t o = 0; o < km.offsets.size(); ++o) {
    const auto& off = km.offsets[o];
    auto& pairs = km.by_offset[o];
    for (std::size_t out = 0; out < km.out_coords.size(); ++out) {
      const VoxelCoord& base = km.out_coords[out];
      const VoxelCoord q{base.i + off[0] * in_stride, base.j + off[1] * in_stride,
                         base.k + off[2] * in_stride, base.batch};
      auto it = in_index.find(q);
      if (it != in_index.end()) pairs.push_back({it->second, static_cast<std::int32_t>(out)});
    }
  }
  return km;
}

std::vector<std::vector<std::pair<int, std::int32_t>>> KernelMap::per_output() const {
  std::vector<std::vector<std::pair<int, std::int32_t>>> out(out_coords.size());
  for (std::size_t o = 0; o < by_offset.size(); ++o) {
    for (const auto& p : by_offset[o]) {
      out[static_cast<std::size_t>(p.output)].emplace_back(static_cast<int>(o), p.input);
    }
  }
  return out;
}

std::vector<std::int32_t> parent_indices(std::span<const VoxelCoord> fine, int fine_stride,
                                         std::span<const VoxelCoord> coarse) {
  std::unordered_map<VoxelCoord, std::int32_t, VoxelCoordHash> coarse_index;
  coarse_index.reserve(coarse.size() * 2);
  for (std::size_t n = 0; n < coarse.size(); ++n) coarse_index.emplace(coarse[n], static_cast<std::int32_t>(n));
  std::vector<std::int32_t> out(fine.size(), -1);
  for (std::size_t n = 0; n < fine.size(); ++n) {
    auto it = coarse_index.find(downsample_coord(fine[n], fine_stride));
    if (it == coarse_index.end()) throw ValidationError("fine voxel without a coarse parent");
    out[n] = it->second;
  }
  return out;
}

}  // namespace fruitreid
