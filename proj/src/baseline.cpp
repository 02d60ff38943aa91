#include "fruitreid/baseline.hpp"

#include <algorithm>
#include <sstream>
#include <tuple>

namespace fruitreid {

TemporalAssociation nn_match(std::span<const Vec3> current, std::span<const Vec3> previous, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  std::vector<std::tuple<double, int, int>> cand;
  for (std::size_t i = 0; i < current.size(); ++i)
    for (std::size_t j = 0; j < previous.size(); ++j) {
      const double d = (current[i] - previous[j]).norm();
      if (d <= epsilon) cand.emplace_back(d, static_cast<int>(i), static_cast<int>(j));
    }
  std::sort(cand.begin(), cand.end());
  TemporalAssociation out;
  out.prev.assign(current.size(), TemporalAssociation::kNoMatch);
  std::vector<bool> taken(previous.size(), false);
  for (const auto& [d, i, j] : cand) {
    if (out.prev[static_cast<std::size_t>(i)] != TemporalAssociation::kNoMatch || taken[static_cast<std::size_t>(j)]) {
      continue;
    }
    out.prev[static_cast<std::size_t>(i)] = j;
    taken[static_cast<std::size_t>(j)] = true;
  }
  return out;
}

EpsilonSweep sweep_epsilon(std::span<const BaselinePair> pairs, std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("epsilon grid is empty");
  if (pairs.empty()) throw EmptyInputError("no pairs to sweep over");
  EpsilonSweep s;
  bool first = true;
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  for (double eps : sorted) {
    MatchConfusion c;
    for (const auto& p : pairs) c += matching_confusion(nn_match(p.current, p.previous, eps), p.truth);
    const double m = f1_scores(c).mf1;
    s.curve[eps] = m;
    if (first || m > s.best_mf1) {
      s.best_mf1 = m;
      s.best_epsilon = eps;
      first = false;
    }
  }
  return s;
}

nlohmann::json to_json(const EpsilonSweep& s) {
  nlohmann::json curve = nlohmann::json::object();
  for (const auto& [eps, m] : s.curve) {
    std::ostringstream key;
    key << eps;
    curve[key.str()] = m;
  }
  return {{"best_epsilon", s.best_epsilon}, {"best_mF1", s.best_mf1}, {"curve", curve}};
}

}  // namespace fruitreid
