#include "fruitreid/synth.hpp"
#include "fruitreid/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace fruitreid {

namespace {

struct Fruit {
  Vec3 center;
  double radius = 0.0;
  Vec3 color;
};

void check_range(const char* name, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError(std::string("orchard ") + name + " range is inverted");
}

void check_prob(const char* name, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("orchard ") + name + " must be in [0, 1]");
}

double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

Vec3 clamp01(const Vec3& c) { return c.cwiseMax(0.0).cwiseMin(1.0); }

bool fits(const std::vector<Fruit>& placed, const Vec3& c, double r, double gap, std::size_t skip = SIZE_MAX) {
  for (std::size_t k = 0; k < placed.size(); ++k) {
    if (k == skip) continue;
    if ((placed[k].center - c).norm() < placed[k].radius + r + gap) return false;
  }
  return true;
}

Vec3 draw_center(const OrchardConfig& c, Rng& rng) {
  std::uniform_real_distribution<double> x(0.0, c.row_length);
  std::uniform_real_distribution<double> y(-c.row_width / 2, c.row_width / 2);
  std::uniform_real_distribution<double> z(-c.hang_depth.second, -c.hang_depth.first);
  return {x(rng), y(rng), z(rng)};
}

std::vector<Fruit> place_fruits(const OrchardConfig& c, Rng& rng) {
  std::uniform_int_distribution<int> count(c.fruit_count.first, c.fruit_count.second);
  std::uniform_real_distribution<double> rad(c.radius_range.first, c.radius_range.second);
  const int n = count(rng);
  std::vector<Fruit> fruits;
  const long budget = 2000L * std::max(n, 1);
  for (long attempt = 0; static_cast<int>(fruits.size()) < n; ++attempt) {
    if (attempt >= budget) {
      throw ConfigError("cannot place " + std::to_string(n) + " fruits with the requested spacing; placed " +
                        std::to_string(fruits.size()));
    }
    const double r = rad(rng);
    const Vec3 p = draw_center(c, rng);
    if (fits(fruits, p, r, c.min_gap)) fruits.push_back({p, r, c.fruit_color});
  }
  return fruits;
}

/// Samples canopy and fruit points and assembles the annotated scene.
Scene render(const OrchardConfig& c, const std::vector<Fruit>& fruits, Rng& rng) {
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_int_distribution<int> ppf(c.points_per_fruit.first, c.points_per_fruit.second);
  ColoredCloud cloud;
  std::vector<int> labels;
  auto keep = [&]() { return c.dropout <= 0.0 || uni(rng) >= c.dropout; };
  auto noisy = [&](const Vec3& base) {
    return clamp01(base + c.color_noise * Vec3(gauss(rng), gauss(rng), gauss(rng)));
  };

  // Canopy height field, with holes where fruits hang through it.
  const double p1 = 2 * std::numbers::pi * uni(rng), p2 = 2 * std::numbers::pi * uni(rng);
  const auto canopy_n = static_cast<long>(std::llround(c.canopy_density * c.row_length * c.row_width));
  for (long k = 0; k < canopy_n; ++k) {
    const double x = uni(rng) * c.row_length;
    const double y = (uni(rng) - 0.5) * c.row_width;
    const double z = c.canopy_amplitude * std::sin(2 * std::numbers::pi * x / 0.13 + p1) *
                         std::cos(2 * std::numbers::pi * y / 0.07 + p2) +
                     c.canopy_noise * gauss(rng);
    const Vec3 p(x, y, z);
    bool inside = false;
    for (const auto& f : fruits) inside = inside || (p - f.center).norm() < f.radius + c.min_gap;
    const Vec3 col = noisy(c.canopy_color);
    if (inside || !keep()) continue;
    cloud.push_back(p.unaryExpr(&f32), col);
    labels.push_back(-1);
  }
  for (std::size_t k = 0; k < fruits.size(); ++k) {
    const auto& f = fruits[k];
    const int n = ppf(rng);
    for (int i = 0; i < n; ++i) {
      Vec3 d(gauss(rng), gauss(rng), gauss(rng));
      d /= std::max(d.norm(), 1e-12);
      const Vec3 col = noisy(f.color);
      if (!keep()) continue;
      cloud.push_back((f.center + f.radius * d).unaryExpr(&f32), col);
      labels.push_back(static_cast<int>(k));
    }
  }
  Scene s{cloud, SceneAnnotation::from_labels(cloud, labels)};
  // Dropout may empty a fruit; renumber so ids stay dense.
  for (std::size_t k = 0; k < s.annotation.instances.size(); ++k) s.annotation.instances[k].id = static_cast<int>(k);
  return s;
}

}  // namespace

void OrchardConfig::validate() const {
  if (!(row_length > 0.0 && row_width > 0.0)) throw ConfigError("orchard row dimensions must be positive");
  if (fruit_count.first < 0) throw ConfigError("orchard fruit count must be nonnegative");
  check_range("fruit_count", fruit_count.first, fruit_count.second);
  if (!(radius_range.first > 0.0)) throw ConfigError("orchard radii must be positive");
  check_range("radius", radius_range.first, radius_range.second);
  if (points_per_fruit.first < 1) throw ConfigError("orchard points_per_fruit must be >= 1");
  check_range("points_per_fruit", points_per_fruit.first, points_per_fruit.second);
  check_range("hang_depth", hang_depth.first, hang_depth.second);
  check_range("growth", growth_range.first, growth_range.second);
  if (!(growth_range.first > 0.0)) throw ConfigError("orchard growth must be positive");
  if (canopy_density < 0.0 || color_noise < 0.0 || drift_sigma < 0.0 || min_gap < 0.0) {
    throw ConfigError("orchard densities, noise levels and gaps must be nonnegative");
  }
  if (!(max_move > 0.0)) throw ConfigError("orchard max_move must be positive");
  check_prob("p_disappear", p_disappear);
  check_prob("p_appear", p_appear);
  check_prob("dropout", dropout);
  if (dropout >= 1.0) throw ConfigError("orchard dropout must be below 1");
}

OrchardConfig OrchardConfig::matcher_scene() {
  OrchardConfig c;
  c.row_length = 0.3;
  c.fruit_count = {15, 15};
  c.points_per_fruit = {250, 350};
  c.canopy_density = 1.5e5;
  return c;
}

nlohmann::json to_json(const OrchardConfig& c) {
  auto v3 = [](const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); };
  auto pr = [](auto p) { return nlohmann::json::array({p.first, p.second}); };
  return {{"row_length", c.row_length},
          {"row_width", c.row_width},
          {"fruit_count", pr(c.fruit_count)},
          {"radius_range", pr(c.radius_range)},
          {"points_per_fruit", pr(c.points_per_fruit)},
          {"canopy_density", c.canopy_density},
          {"canopy_amplitude", c.canopy_amplitude},
          {"canopy_noise", c.canopy_noise},
          {"hang_depth", pr(c.hang_depth)},
          {"min_gap", c.min_gap},
          {"fruit_color", v3(c.fruit_color)},
          {"unripe_color", v3(c.unripe_color)},
          {"canopy_color", v3(c.canopy_color)},
          {"color_noise", c.color_noise},
          {"maturation_shift", v3(c.maturation_shift)},
          {"growth_range", pr(c.growth_range)},
          {"drift_sigma", c.drift_sigma},
          {"max_move", c.max_move},
          {"p_disappear", c.p_disappear},
          {"p_appear", c.p_appear},
          {"dropout", c.dropout},
          {"rng_seed", c.rng_seed}};
}

OrchardConfig orchard_config_from_json(const nlohmann::json& j) {
  OrchardConfig c;
  const nlohmann::json defaults = to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (key != "schema_version" && !defaults.contains(key)) throw ConfigError("unknown orchard config key '" + key + "'");
  }
  try {
    auto v3 = [&](const char* k, Vec3& out) {
      if (j.contains(k)) out = Vec3(j[k].at(0).get<double>(), j[k].at(1).get<double>(), j[k].at(2).get<double>());
    };
    auto pr = [&](const char* k, auto& out) {
      if (j.contains(k)) {
        using T = std::decay_t<decltype(out.first)>;
        out = {j[k].at(0).get<T>(), j[k].at(1).get<T>()};
      }
    };
    auto sc = [&](const char* k, auto& out) {
      if (j.contains(k)) out = j[k].get<std::decay_t<decltype(out)>>();
    };
    sc("row_length", c.row_length);
    sc("row_width", c.row_width);
    pr("fruit_count", c.fruit_count);
    pr("radius_range", c.radius_range);
    pr("points_per_fruit", c.points_per_fruit);
    sc("canopy_density", c.canopy_density);
    sc("canopy_amplitude", c.canopy_amplitude);
    sc("canopy_noise", c.canopy_noise);
    pr("hang_depth", c.hang_depth);
    sc("min_gap", c.min_gap);
    v3("fruit_color", c.fruit_color);
    v3("unripe_color", c.unripe_color);
    v3("canopy_color", c.canopy_color);
    sc("color_noise", c.color_noise);
    v3("maturation_shift", c.maturation_shift);
    pr("growth_range", c.growth_range);
    sc("drift_sigma", c.drift_sigma);
    sc("max_move", c.max_move);
    sc("p_disappear", c.p_disappear);
    sc("p_appear", c.p_appear);
    sc("dropout", c.dropout);
    sc("rng_seed", c.rng_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("orchard config: ") + e.what());
  }
  c.validate();
  return c;
}

Scene generate_scene(const OrchardConfig& config) {
  config.validate();
  Rng place = make_rng(config.rng_seed, "synth/placement");
  Rng points = make_rng(config.rng_seed, "synth/points/t0");
  return render(config, place_fruits(config, place), points);
}

ScenePair generate_pair(const OrchardConfig& config) {
  config.validate();
  Rng place = make_rng(config.rng_seed, "synth/placement");
  Rng temporal = make_rng(config.rng_seed, "synth/temporal");
  const auto before = place_fruits(config, place);

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_real_distribution<double> growth(config.growth_range.first, config.growth_range.second);
  std::normal_distribution<double> gauss;

  std::vector<Fruit> after;
  std::vector<int> origin;  // index into `before`, -1 for new fruit
  for (std::size_t k = 0; k < before.size(); ++k) {
    if (uni(temporal) < config.p_disappear) continue;
    Fruit f = before[k];
    f.color = clamp01(f.color + config.maturation_shift);
    const double grown = f.radius * growth(temporal);
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Vec3 d = config.drift_sigma * Vec3(gauss(temporal), gauss(temporal), gauss(temporal));
      if (d.norm() > config.max_move) continue;
      if (fits(after, f.center + d, grown, config.min_gap)) {
        f.center += d;
        f.radius = grown;
        placed = true;
      }
    }
    // Crowded spots fall back to staying put without growing.
    if (!placed && !fits(after, f.center, f.radius, config.min_gap)) continue;
    after.push_back(f);
    origin.push_back(static_cast<int>(k));
  }
  std::uniform_real_distribution<double> small(0.75 * config.radius_range.first, config.radius_range.first);
  for (std::size_t slot = 0; slot < before.size(); ++slot) {
    if (uni(temporal) >= config.p_appear) continue;
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double r = small(temporal);
      const Vec3 p = draw_center(config, temporal);
      if (fits(after, p, r, config.min_gap)) {
        after.push_back({p, r, config.unripe_color});
        origin.push_back(-1);
        break;
      }
    }
  }
  // Shuffle so instance order carries no identity.
  std::vector<std::size_t> perm(after.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), temporal);
  std::vector<Fruit> shuffled;
  std::vector<int> shuffled_origin;
  for (auto i : perm) {
    shuffled.push_back(after[i]);
    shuffled_origin.push_back(origin[i]);
  }

  Rng points0 = make_rng(config.rng_seed, "synth/points/t0");
  Rng points1 = make_rng(config.rng_seed, "synth/points/t1");
  ScenePair pair;
  pair.previous = render(config, before, points0);
  pair.current = render(config, shuffled, points1);
  pair.association.prev = shuffled_origin;
  if (pair.previous.annotation.instances.size() != before.size() ||
      pair.current.annotation.instances.size() != shuffled.size()) {
    throw ConfigError("dropout removed every point of a fruit; lower dropout or raise points_per_fruit");
  }
  return pair;
}

void write_pair(const std::filesystem::path& dir, const ScenePair& pair, const OrchardConfig& config) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  save_ply(dir / "scene_t0.ply", pair.previous.cloud, &pair.previous.annotation);
  save_ply(dir / "scene_t1.ply", pair.current.cloud, &pair.current.annotation);
  save_association_csv(dir / "assoc_t1_t0.csv", pair.association, &pair.current.annotation,
                       &pair.previous.annotation);
  std::ofstream out(dir / "config.json");
  if (!out) throw IoError("cannot write '" + (dir / "config.json").string() + "'");
  nlohmann::json j = to_json(config);
  j["schema_version"] = 1;
  out << j.dump(2) << '\n';
}

ScenePair read_pair(const std::filesystem::path& dir) {
  auto load = [&](const char* name) {
    auto data = load_ply(dir / name);
    if (!data.annotation) throw ValidationError((dir / name).string() + " has no instance_id property");
    return Scene{std::move(data.cloud), std::move(*data.annotation)};
  };
  ScenePair p;
  p.previous = load("scene_t0.ply");
  p.current = load("scene_t1.ply");
  p.association = load_association_csv(dir / "assoc_t1_t0.csv", &p.current.annotation, &p.previous.annotation,
                                       p.current.annotation.instances.size());
  return p;
}

std::vector<std::filesystem::path> pair_directories(const std::filesystem::path& root) {
  if (std::filesystem::exists(root / "scene_t0.ply")) return {root};
  if (!std::filesystem::is_directory(root)) throw IoError("'" + root.string() + "' is not a directory");
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && e.path().filename().string().rfind("pair_", 0) == 0 &&
        std::filesystem::exists(e.path() / "scene_t0.ply")) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no scene pairs under '" + root.string() + "'");
  return out;
}

}  // namespace fruitreid
