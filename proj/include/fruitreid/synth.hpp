#pragma once

#include "fruitreid/cloud.hpp"

#include <json.hpp>

#include <filesystem>
#include <utility>
#include <vector>

namespace fruitreid {

/// Synthetic strawberry row: a green canopy slab along x with red fruits
/// hanging underneath. Lengths in meters.
struct OrchardConfig {
  double row_length = 0.5;
  double row_width = 0.10;
  std::pair<int, int> fruit_count{20, 20};
  std::pair<double, double> radius_range{0.008, 0.011};
  std::pair<int, int> points_per_fruit{700, 900};
  /// Canopy points per square meter of row footprint.
  double canopy_density = 4.4e5;
  double canopy_amplitude = 0.008;
  double canopy_noise = 0.003;
  /// Fruit centers hang this far below the canopy mid-plane.
  std::pair<double, double> hang_depth{0.015, 0.035};
  /// Extra clearance between fruit surfaces.
  double min_gap = 0.002;
  Vec3 fruit_color{0.80, 0.12, 0.10};
  Vec3 unripe_color{0.78, 0.82, 0.55};
  Vec3 canopy_color{0.20, 0.55, 0.18};
  double color_noise = 0.05;
  /// Per-visit ripening: added to the fruit base color and clamped.
  Vec3 maturation_shift{0.05, -0.03, -0.02};

  // Temporal behavior between two visits.
  std::pair<double, double> growth_range{1.0, 1.08};
  double drift_sigma = 0.01;  // per axis
  double max_move = 0.05;     // h; drifts are resampled until |drift| <= h
  double p_disappear = 0.1;
  double p_appear = 0.1;
  /// Uniform point dropout emulating occlusion.
  double dropout = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
  /// Scaled-down row with about 15 fruits, used for matcher experiments.
  static OrchardConfig matcher_scene();
};

nlohmann::json to_json(const OrchardConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
OrchardConfig orchard_config_from_json(const nlohmann::json& j);

struct Scene {
  ColoredCloud cloud;
  SceneAnnotation annotation;
};

struct ScenePair {
  Scene previous;  // t-1
  Scene current;   // t
  TemporalAssociation association;
};

Scene generate_scene(const OrchardConfig& config);
ScenePair generate_pair(const OrchardConfig& config);

/// Writes scene_t0.ply (previous), scene_t1.ply (current), assoc_t1_t0.csv
/// and config.json.
void write_pair(const std::filesystem::path& dir, const ScenePair& pair, const OrchardConfig& config);
ScenePair read_pair(const std::filesystem::path& dir);

/// `root` itself when it holds a pair, otherwise its pair_* subdirectories
/// in name order.
std::vector<std::filesystem::path> pair_directories(const std::filesystem::path& root);

}  // namespace fruitreid
