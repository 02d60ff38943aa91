#pragma once

#include "fruitreid/common.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace fruitreid {

/// Colored point cloud. Positions are in meters, colors are RGB in [0,1].
struct ColoredCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  void push_back(const Vec3& p, const Vec3& c) {
    points.push_back(p);
    colors.push_back(c);
  }

  /// Throws ValidationError naming the first offending vertex.
  void validate() const;

  /// Subset in the order given by `indices`.
  ColoredCloud select(std::span<const std::uint32_t> indices) const;
};

/// One fruit: its member points plus the derived center and radius.
/// `id` is the label carried in files; instances are addressed by position
/// in SceneAnnotation::instances everywhere else.
struct FruitInstance {
  int id = 0;
  std::vector<std::uint32_t> point_indices;  // sorted, unique
  Vec3 center = Vec3::Zero();
  double radius = 0.0;

  /// Center is the mean of the member points, radius the distance to the
  /// farthest member.
  void recompute(const ColoredCloud& cloud);
};

enum class Semantic : std::uint8_t { Background = 0, Fruit = 1 };

struct SceneAnnotation {
  std::vector<FruitInstance> instances;
  std::vector<std::uint32_t> background_indices;  // sorted
  std::vector<Semantic> per_point_semantic;

  std::size_t point_count() const { return per_point_semantic.size(); }

  /// Builds an annotation from per-point instance labels (-1 = background).
  /// Instances are ordered by ascending label and keep the label as id.
  static SceneAnnotation from_labels(const ColoredCloud& cloud,
                                     std::span<const int> labels);

  /// Per-point instance index into `instances` (-1 for background).
  std::vector<int> instance_index_per_point() const;

  /// Per-point file label (instance id, -1 for background).
  std::vector<int> id_per_point() const;

  void recompute(const ColoredCloud& cloud);

  /// Checks the partition and semantic invariants against `n_points`.
  void validate(std::size_t n_points) const;

  std::vector<Vec3> centers() const;
};

/// Association of time-t instances with time-(t-1) instances.
/// prev[i] is an instance index at t-1 or kNoMatch.
struct TemporalAssociation {
  static constexpr int kNoMatch = -1;
  std::vector<int> prev;

  std::size_t size() const { return prev.size(); }
  bool is_injective() const;
  std::size_t no_match_count() const;
};

struct AugmentConfig {
  std::pair<double, double> yaw_range_deg{0.0, 0.0};
  std::pair<double, double> per_axis_rotation_range_deg{0.0, 0.0};
  std::array<bool, 3> flip_axes{false, false, false};
  std::pair<double, double> scale_range{1.0, 1.0};
  double point_jitter_sigma = 0.0;  // meters
  double color_jitter_sigma = 0.0;
  /// Rotations, flips and scaling act about the origin instead of the
  /// point centroid. Support clouds are already centered on their fruit.
  bool pivot_at_origin = false;
  std::uint64_t rng_seed = 0;

  void validate() const;

  /// Descriptor/matcher training: +-30 deg per axis, 7e-4 m point jitter,
  /// 0.05 color jitter.
  static AugmentConfig matcher_preset(std::uint64_t seed);
  /// Segmentation training: full yaw, x/y flips, scale in [0.97, 1.03].
  static AugmentConfig segmentation_preset(std::uint64_t seed);
};

/// Keeps points with |p[axis] - center[axis]| <= width/2. Instances losing
/// every point are dropped; the rest are reindexed and recomputed.
std::pair<ColoredCloud, SceneAnnotation> crop_box(const ColoredCloud& cloud,
                                                  const SceneAnnotation& annotation,
                                                  const Vec3& center, double width,
                                                  int axis = 0);

ColoredCloud crop_box(const ColoredCloud& cloud, const Vec3& center, double width,
                      int axis = 0);

/// Rotate -> flip -> scale -> point jitter -> color jitter, all drawn from
/// a generator seeded with config.rng_seed.
std::pair<ColoredCloud, SceneAnnotation> augment(const ColoredCloud& cloud,
                                                 const SceneAnnotation& annotation,
                                                 const AugmentConfig& config);

ColoredCloud augment(const ColoredCloud& cloud, const AugmentConfig& config);

}  // namespace fruitreid
