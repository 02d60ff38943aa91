#pragma once

#include "fruitreid/metrics.hpp"

#include <map>
#include <vector>

namespace fruitreid {

/// Nearest-neighbor re-identification: repeatedly pairs the globally closest
/// unpaired (current, previous) centers while their distance is <= epsilon.
/// Ties go to the lower current index, then the lower previous index.
TemporalAssociation nn_match(std::span<const Vec3> current, std::span<const Vec3> previous, double epsilon);

struct BaselinePair {
  std::vector<Vec3> current;
  std::vector<Vec3> previous;
  TemporalAssociation truth;
};

struct EpsilonSweep {
  double best_epsilon = 0.0;
  double best_mf1 = 0.0;
  std::map<double, double> curve;  // epsilon -> mF1 over all pairs
};

/// Evaluates nn_match at every grid value with confusions pooled over the
/// pairs. Ties in mF1 go to the smaller epsilon.
EpsilonSweep sweep_epsilon(std::span<const BaselinePair> pairs, std::span<const double> grid);

nlohmann::json to_json(const EpsilonSweep& s);

}  // namespace fruitreid
