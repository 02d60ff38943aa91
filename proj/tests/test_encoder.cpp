#include "fruitreid/encoder.hpp"
#include "fruitreid/nn/checkpoint.hpp"
#include "support/random_cloud.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace fruitreid;
using fruitreid::testing::random_cloud;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.voxel_size = 0.25;
  c.blocks = 2;
  c.channels = {4, 4, 6};
  c.support_radius = 1.0;
  c.rng_seed = 2;
  return c;
}

// Dyadic coordinates on a quarter grid, exact in binary floating point.
ColoredCloud dyadic_cloud(std::size_t n, std::uint64_t seed, int extent = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> q(-4 * extent, 4 * extent);
  std::uniform_int_distribution<int> byte(0, 255);
  ColoredCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.push_back(Vec3(q(rng), q(rng), q(rng)) / 16.0, Vec3(byte(rng), byte(rng), byte(rng)) / 255.0);
  }
  return c;
}

std::vector<nn::Parameter*> all_params(nn::ParamStore& s) {
  std::vector<nn::Parameter*> out;
  for (auto& [name, p] : s.params()) out.push_back(&p);
  return out;
}

}  // namespace

TEST_CASE("config validation and JSON round trip") {
  EncoderConfig c;
  CHECK(c.descriptor_dim() == 64);
  CHECK_NOTHROW(c.validate());
  CHECK(to_json(encoder_config_from_json(to_json(c))) == to_json(c));
  c.channels = {8, 8, 16};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EncoderConfig{};
  c.blocks = 0;
  c.channels = {8};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(EncoderConfig::desk().support_radius == 0.03);
}

TEST_CASE("paper configuration yields a 64-d descriptor") {
  Encoder enc(EncoderConfig{});
  const auto d = enc.encode(random_cloud(400, 1, 0.01));
  CHECK(d.size() == 64);
  CHECK(d.allFinite());
}

TEST_CASE("a single-voxel support has a defined descriptor") {
  Encoder enc(small_config());
  ColoredCloud one;
  one.push_back(Vec3(0.01, 0.01, 0.01), Vec3(0.5, 0.2, 0.1));
  const auto d = enc.encode(one);
  CHECK(d.size() == 6);
  CHECK(d.allFinite());
  CHECK_THROWS_AS(enc.encode(ColoredCloud{}), EmptyInputError);
}

TEST_CASE("eval mode is deterministic") {
  Encoder a(small_config()), b(small_config());
  const auto cloud = dyadic_cloud(120, 3);
  CHECK(a.encode(cloud) == a.encode(cloud));
  CHECK(a.encode(cloud) == b.encode(cloud));
}

TEST_CASE("translating by whole coarse cells leaves the descriptor bit-identical") {
  Encoder enc(small_config());
  // Coarsest stride is 2^blocks voxels = 1.0 here.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto cloud = dyadic_cloud(150, seed);
    ColoredCloud moved = cloud;
    const Vec3 shift(3.0, -2.0, 5.0);
    for (auto& p : moved.points) p += shift;
    CHECK(enc.encode(cloud) == enc.encode(moved));
  }
}

TEST_CASE("batched descriptors equal the per-instance loop") {
  Encoder enc(small_config());
  const auto cloud = dyadic_cloud(400, 7);
  std::vector<int> labels(cloud.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 5) - 1;
  const auto ann = SceneAnnotation::from_labels(cloud, labels);
  const auto set = encode_all(cloud, ann.instances, enc, "t");
  REQUIRE(set.size() == ann.instances.size());
  CHECK(set.tag == "t");
  const auto supports = instance_supports(cloud, ann.instances, enc.config(), enc.config().rng_seed);
  for (std::size_t i = 0; i < supports.size(); ++i) {
    CHECK(set.instance_ids[i] == ann.instances[i].id);
    const Descriptor d = enc.encode(supports[i]);
    CHECK((set.values.row(static_cast<Eigen::Index>(i)).transpose() - d).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(encode_all(cloud, {}, enc).size() == 0);
}

TEST_CASE("an empty support gets a zero descriptor") {
  Encoder enc(small_config());
  ColoredCloud cloud = dyadic_cloud(50, 1, 2);
  FruitInstance far;
  far.id = 9;
  far.center = Vec3(100, 100, 100);
  FruitInstance near;
  near.id = 1;
  near.center = Vec3::Zero();
  const std::vector<FruitInstance> inst{far, near};
  const auto set = encode_all(cloud, inst, enc);
  CHECK(set.values.row(0).isZero());
  CHECK_FALSE(set.values.row(1).isZero());
}

TEST_CASE("supports are capped at max_support_points deterministically") {
  EncoderConfig c = small_config();
  c.max_support_points = 40;
  const auto cloud = random_cloud(500, 2, 0.5);
  FruitInstance f;
  f.center = Vec3::Zero();
  const std::vector<FruitInstance> inst{f};
  const auto a = instance_supports(cloud, inst, c, 5);
  const auto b = instance_supports(cloud, inst, c, 5);
  REQUIRE(a.size() == 1);
  CHECK(a[0].size() == 40);
  CHECK(a[0].points == b[0].points);
}

TEST_CASE("encoder gradients pass finite-difference checks on small supports") {
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 20 && seed < 80; ++seed) {
    Encoder enc(small_config());
    const std::vector<ColoredCloud> supports{random_cloud(25, seed, 0.6), random_cloud(20, seed + 1000, 0.6)};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    nn::Matrix w(12, 1);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = g(rng);
    nn::GraphMaps graph;  // maps must outlive each backward pass
    auto loss = [&](nn::Tape& t) {
      nn::Var d = enc.forward(t, graph, supports, true);
      return nn::sum_all(nn::matmul(nn::reshape(d, 1, 12), t.constant(w)));
    };
    {
      nn::Tape warm;
      loss(warm);  // creates the parameters
    }
    const auto targets = all_params(enc.store());
    const auto r = nn::grad_check(loss, targets, {1e-6, 12, seed});
    if (r.min_kink_distance < 1e-4) continue;
    CHECK(r.max_rel_error < 1e-3);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("descriptor CSV and sidecar") {
  const auto dir = std::filesystem::temp_directory_path() / "fruitreid_desc";
  std::filesystem::create_directories(dir);
  Encoder enc(small_config());
  const auto cloud = dyadic_cloud(200, 4);
  std::vector<int> labels(cloud.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  const auto ann = SceneAnnotation::from_labels(cloud, labels);
  const auto set = encode_all(cloud, ann.instances, enc, "t1");
  save_descriptors(dir / "d.csv", set, enc.config());
  std::ifstream in(dir / "d.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "instance_id,d0,d1,d2,d3,d4,d5");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 3);
  std::ifstream side(dir / "d.csv.json");
  const auto j = nlohmann::json::parse(side);
  CHECK(j.at("count") == 3);
  CHECK(j.at("tag") == "t1");
  CHECK(j.at("config_hash").get<std::string>().size() == 16);
  std::filesystem::remove_all(dir);
}
