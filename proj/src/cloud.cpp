#include "fruitreid/cloud.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>

namespace fruitreid {

void ColoredCloud::validate() const {
  if (points.size() != colors.size()) {
    throw ValidationError("cloud has " + std::to_string(points.size()) + " points but " +
                          std::to_string(colors.size()) + " colors");
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite()) {
      throw ValidationError("vertex " + std::to_string(i) + " has a non-finite coordinate");
    }
    for (int c = 0; c < 3; ++c) {
      const double v = colors[i][c];
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ValidationError("vertex " + std::to_string(i) + " has color channel outside [0,1]");
      }
    }
  }
}

ColoredCloud ColoredCloud::select(std::span<const std::uint32_t> indices) const {
  ColoredCloud out;
  out.points.reserve(indices.size());
  out.colors.reserve(indices.size());
  for (auto i : indices) out.push_back(points[i], colors[i]);
  return out;
}

void FruitInstance::recompute(const ColoredCloud& cloud) {
  center.setZero();
  radius = 0.0;
  if (point_indices.empty()) return;
  for (auto i : point_indices) center += cloud.points[i];
  center /= static_cast<double>(point_indices.size());
  for (auto i : point_indices) radius = std::max(radius, (cloud.points[i] - center).norm());
}

SceneAnnotation SceneAnnotation::from_labels(const ColoredCloud& cloud,
                                             std::span<const int> labels) {
  if (labels.size() != cloud.size()) {
    throw ValidationError("label count " + std::to_string(labels.size()) +
                          " does not match point count " + std::to_string(cloud.size()));
  }
  SceneAnnotation ann;
  ann.per_point_semantic.assign(labels.size(), Semantic::Background);
  std::map<int, std::vector<std::uint32_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto idx = static_cast<std::uint32_t>(i);
    if (labels[i] < 0) {
      ann.background_indices.push_back(idx);
    } else {
      groups[labels[i]].push_back(idx);
      ann.per_point_semantic[i] = Semantic::Fruit;
    }
  }
  ann.instances.reserve(groups.size());
  for (auto& [id, members] : groups) {
    FruitInstance inst;
    inst.id = id;
    inst.point_indices = std::move(members);
    inst.recompute(cloud);
    ann.instances.push_back(std::move(inst));
  }
  return ann;
}

std::vector<int> SceneAnnotation::instance_index_per_point() const {
  std::vector<int> out(point_count(), -1);
  for (std::size_t k = 0; k < instances.size(); ++k) {
    for (auto i : instances[k].point_indices) out[i] = static_cast<int>(k);
  }
  return out;
}

std::vector<int> SceneAnnotation::id_per_point() const {
  std::vector<int> out(point_count(), -1);
  for (const auto& inst : instances) {
    for (auto i : inst.point_indices) out[i] = inst.id;
  }
  return out;
}

void SceneAnnotation::recompute(const ColoredCloud& cloud) {
  for (auto& inst : instances) inst.recompute(cloud);
}

void SceneAnnotation::validate(std::size_t n_points) const {
  if (per_point_semantic.size() != n_points) {
    throw ValidationError("annotation covers " + std::to_string(per_point_semantic.size()) +
                          " points, cloud has " + std::to_string(n_points));
  }
  std::vector<int> seen(n_points, 0);
  for (const auto& inst : instances) {
    if (inst.point_indices.empty()) throw ValidationError("instance with no points");
    for (auto i : inst.point_indices) {
      if (i >= n_points) throw ValidationError("instance point index out of range");
      if (per_point_semantic[i] != Semantic::Fruit) {
        throw ValidationError("instance point " + std::to_string(i) + " not labeled fruit");
      }
      ++seen[i];
    }
  }
  for (auto i : background_indices) {
    if (i >= n_points) throw ValidationError("background index out of range");
    if (per_point_semantic[i] != Semantic::Background) {
      throw ValidationError("background point " + std::to_string(i) + " labeled fruit");
    }
    ++seen[i];
  }
  for (std::size_t i = 0; i < n_points; ++i) {
    if (seen[i] != 1) {
      throw ValidationError("point " + std::to_string(i) + " appears " + std::to_string(seen[i]) +
                            " times in the partition");
    }
  }
}

std::vector<Vec3> SceneAnnotation::centers() const {
  std::vector<Vec3> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(inst.center);
  return out;
}

bool TemporalAssociation::is_injective() const {
  std::vector<int> used;
  for (int p : prev) {
    if (p == kNoMatch) continue;
    used.push_back(p);
  }
  std::sort(used.begin(), used.end());
  return std::adjacent_find(used.begin(), used.end()) == used.end();
}

std::size_t TemporalAssociation::no_match_count() const {
  return static_cast<std::size_t>(std::count(prev.begin(), prev.end(), kNoMatch));
}

void AugmentConfig::validate() const {
  auto ordered = [](const std::pair<double, double>& r) { return r.first <= r.second; };
  if (!ordered(yaw_range_deg) || !ordered(per_axis_rotation_range_deg) || !ordered(scale_range)) {
    throw ConfigError("augmentation range with min > max");
  }
  if (scale_range.first <= 0.0) throw ConfigError("augmentation scale must be positive");
  if (point_jitter_sigma < 0.0 || color_jitter_sigma < 0.0) {
    throw ConfigError("augmentation sigma must be nonnegative");
  }
}

AugmentConfig AugmentConfig::matcher_preset(std::uint64_t seed) {
  AugmentConfig c;
  c.per_axis_rotation_range_deg = {-30.0, 30.0};
  c.point_jitter_sigma = 7e-4;
  c.color_jitter_sigma = 0.05;
  c.pivot_at_origin = true;
  c.rng_seed = seed;
  return c;
}

AugmentConfig AugmentConfig::segmentation_preset(std::uint64_t seed) {
  AugmentConfig c;
  c.yaw_range_deg = {-180.0, 180.0};
  c.flip_axes = {true, true, false};
  c.scale_range = {0.97, 1.03};
  c.rng_seed = seed;
  return c;
}

namespace {

SceneAnnotation remap_annotation(const SceneAnnotation& annotation,
                                 const std::vector<std::int64_t>& old_to_new,
                                 const ColoredCloud& out_cloud) {
  SceneAnnotation out;
  out.per_point_semantic.assign(out_cloud.size(), Semantic::Background);
  for (const auto& inst : annotation.instances) {
    FruitInstance kept;
    kept.id = inst.id;
    for (auto i : inst.point_indices) {
      if (old_to_new[i] >= 0) kept.point_indices.push_back(static_cast<std::uint32_t>(old_to_new[i]));
    }
    if (kept.point_indices.empty()) continue;
    std::sort(kept.point_indices.begin(), kept.point_indices.end());
    for (auto i : kept.point_indices) out.per_point_semantic[i] = Semantic::Fruit;
    kept.recompute(out_cloud);
    out.instances.push_back(std::move(kept));
  }
  for (std::uint32_t i = 0; i < out_cloud.size(); ++i) {
    if (out.per_point_semantic[i] == Semantic::Background) out.background_indices.push_back(i);
  }
  return out;
}

std::vector<std::uint32_t> crop_indices(const ColoredCloud& cloud, const Vec3& center, double width,
                                        int axis) {
  if (!(width > 0.0)) throw ConfigError("crop width must be positive");
  if (axis < 0 || axis > 2) throw ConfigError("crop axis must be 0, 1 or 2");
  const double half = width / 2.0;
  std::vector<std::uint32_t> keep;
  for (std::uint32_t i = 0; i < cloud.size(); ++i) {
    if (std::abs(cloud.points[i][axis] - center[axis]) <= half) keep.push_back(i);
  }
  return keep;
}

Eigen::Matrix3d rotation_xyz(double rx, double ry, double rz) {
  using Eigen::AngleAxisd;
  return (AngleAxisd(rz, Vec3::UnitZ()) * AngleAxisd(ry, Vec3::UnitY()) *
          AngleAxisd(rx, Vec3::UnitX()))
      .toRotationMatrix();
}

}  // namespace

ColoredCloud crop_box(const ColoredCloud& cloud, const Vec3& center, double width, int axis) {
  return cloud.select(crop_indices(cloud, center, width, axis));
}

std::pair<ColoredCloud, SceneAnnotation> crop_box(const ColoredCloud& cloud,
                                                  const SceneAnnotation& annotation,
                                                  const Vec3& center, double width, int axis) {
  const auto keep = crop_indices(cloud, center, width, axis);
  ColoredCloud out = cloud.select(keep);
  std::vector<std::int64_t> old_to_new(cloud.size(), -1);
  for (std::size_t k = 0; k < keep.size(); ++k) old_to_new[keep[k]] = static_cast<std::int64_t>(k);
  SceneAnnotation ann = remap_annotation(annotation, old_to_new, out);
  return {std::move(out), std::move(ann)};
}

ColoredCloud augment(const ColoredCloud& cloud, const AugmentConfig& config) {
  config.validate();
  Rng rng(config.rng_seed);
  constexpr double kDeg = std::numbers::pi / 180.0;
  auto uniform = [&rng](const std::pair<double, double>& r) {
    return std::uniform_real_distribution<double>(r.first, r.second)(rng);
  };

  const double yaw = uniform(config.yaw_range_deg) * kDeg;
  const double rx = uniform(config.per_axis_rotation_range_deg) * kDeg;
  const double ry = uniform(config.per_axis_rotation_range_deg) * kDeg;
  const double rz = uniform(config.per_axis_rotation_range_deg) * kDeg;
  std::array<bool, 3> flip{false, false, false};
  std::bernoulli_distribution coin(0.5);
  for (int a = 0; a < 3; ++a) {
    if (config.flip_axes[a]) flip[a] = coin(rng);
  }
  const double scale = uniform(config.scale_range);

  ColoredCloud out = cloud;
  const bool rigid_identity = yaw == 0.0 && rx == 0.0 && ry == 0.0 && rz == 0.0 && scale == 1.0 &&
                              !flip[0] && !flip[1] && !flip[2];
  if (!rigid_identity && !out.empty()) {
    Vec3 pivot = Vec3::Zero();
    if (!config.pivot_at_origin) {
      for (const auto& p : cloud.points) pivot += p;
      pivot /= static_cast<double>(cloud.size());
    }
    Eigen::Matrix3d transform = rotation_xyz(rx, ry, rz + yaw);
    for (int a = 0; a < 3; ++a) {
      if (flip[a]) transform.row(a) *= -1.0;
    }
    transform *= scale;
    for (auto& p : out.points) p = transform * (p - pivot) + pivot;
  }

  if (config.point_jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, config.point_jitter_sigma);
    for (auto& p : out.points) {
      for (int a = 0; a < 3; ++a) p[a] += noise(rng);
    }
  }
  if (config.color_jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, config.color_jitter_sigma);
    for (auto& c : out.colors) {
      for (int a = 0; a < 3; ++a) c[a] = std::clamp(c[a] + noise(rng), 0.0, 1.0);
    }
  }
  return out;
}

std::pair<ColoredCloud, SceneAnnotation> augment(const ColoredCloud& cloud,
                                                 const SceneAnnotation& annotation,
                                                 const AugmentConfig& config) {
  ColoredCloud out = augment(cloud, config);
  SceneAnnotation ann = annotation;
  ann.recompute(out);
  return {std::move(out), std::move(ann)};
}

}  // namespace fruitreid
