#include "fruitreid/encoder.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

namespace fruitreid {

using nn::Matrix;
using nn::Var;

void EncoderConfig::validate() const {
  if (!(support_radius > 0.0)) throw ConfigError("encoder support_radius must be positive");
  if (!(voxel_size > 0.0)) throw ConfigError("encoder voxel_size must be positive");
  if (blocks < 1) throw ConfigError("encoder needs at least one block");
  if (channels.size() != static_cast<std::size_t>(blocks) + 1) {
    throw ConfigError("encoder channel plan needs blocks + 1 = " + std::to_string(blocks + 1) + " entries, got " +
                      std::to_string(channels.size()));
  }
  for (int c : channels)
    if (c <= 0) throw ConfigError("encoder channels must be positive");
  if (max_support_points == 0) throw ConfigError("max_support_points must be positive");
}

EncoderConfig EncoderConfig::desk() {
  EncoderConfig c;
  c.support_radius = 0.03;
  c.voxel_size = 0.002;
  return c;
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"support_radius", c.support_radius},
          {"voxel_size", c.voxel_size},
          {"blocks", c.blocks},
          {"channels", c.channels},
          {"max_support_points", c.max_support_points},
          {"rng_seed", c.rng_seed}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.support_radius = j.value("support_radius", c.support_radius);
    c.voxel_size = j.value("voxel_size", c.voxel_size);
    c.blocks = j.value("blocks", c.blocks);
    c.channels = j.value("channels", c.channels);
    c.max_support_points = j.value("max_support_points", c.max_support_points);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

Encoder::Encoder(EncoderConfig config)
    : config_(std::move(config)), store_(derive_seed(config_.rng_seed, "init/encoder")) {
  config_.validate();
}

Encoder::Encoder(EncoderConfig config, nn::ParamStore store) : config_(std::move(config)), store_(std::move(store)) {
  config_.validate();
}

namespace {

Var conv_bn(nn::Tape& t, nn::ParamStore& s, const std::string& name, Var x, const KernelMap& map, Eigen::Index out,
            bool train) {
  return nn::batch_norm_layer(t, s, name + ".bn", nn::conv_layer(t, s, name + ".conv", x, map, out), train);
}

}  // namespace

Var Encoder::forward(nn::Tape& t, nn::GraphMaps& graph, std::span<const ColoredCloud> supports, bool train) {
  const Eigen::Index z = config_.descriptor_dim();
  std::vector<ColoredCloud> nonempty;
  std::vector<std::int32_t> slot(supports.size());
  for (std::size_t i = 0; i < supports.size(); ++i) {
    if (supports[i].empty()) {
      slot[i] = -1;
    } else {
      slot[i] = static_cast<std::int32_t>(nonempty.size());
      nonempty.push_back(supports[i]);
    }
  }
  const auto count = static_cast<std::int32_t>(nonempty.size());
  for (auto& s : slot)
    if (s < 0) s = count;  // the appended zero row
  Var zero = t.constant(Matrix::Zero(1, z));
  if (count == 0) return nn::gather_rows(zero, std::move(slot));

  auto [tensor, maps] = voxelize_batch(nonempty, config_.voxel_size);
  std::vector<VoxelCoord> coords = tensor.coords;
  int stride = 1;
  const auto& ch = config_.channels;
  Var h = t.constant(Matrix(tensor.features));
  const KernelMap& stem = graph.add(kernel_neighbors(coords, stride, 3, 1));
  h = nn::relu(conv_bn(t, store_, "enc.stem.a", h, stem, ch[0], train));
  h = nn::relu(conv_bn(t, store_, "enc.stem.b", h, stem, ch[0], train));
  for (int b = 1; b <= config_.blocks; ++b) {
    const std::string name = "enc.block" + std::to_string(b);
    const auto c = ch[static_cast<std::size_t>(b)];
    const KernelMap& down = graph.add(kernel_neighbors(coords, stride, 3, 2));
    coords = down.out_coords;
    stride *= 2;
    h = nn::relu(conv_bn(t, store_, name + ".down", h, down, c, train));
    const KernelMap& same = graph.add(kernel_neighbors(coords, stride, 3, 1));
    const KernelMap& point = graph.add(kernel_neighbors(coords, stride, 1, 1));
    Var m = nn::relu(conv_bn(t, store_, name + ".a.conv1", h, same, c, train));
    m = conv_bn(t, store_, name + ".a.conv2", m, same, c, train);
    Var shortcut = conv_bn(t, store_, name + ".a.shortcut", h, point, c, train);
    h = nn::relu(nn::add(m, shortcut));
    m = nn::relu(conv_bn(t, store_, name + ".b.conv1", h, same, c, train));
    m = conv_bn(t, store_, name + ".b.conv2", m, same, c, train);
    h = nn::relu(nn::add(m, h));
  }
  std::vector<std::int32_t> segment(coords.size());
  for (std::size_t r = 0; r < coords.size(); ++r) segment[r] = coords[r].batch;
  Var pooled = nn::segment_mean(h, std::move(segment), count);
  return nn::gather_rows(nn::concat_rows({pooled, zero}), std::move(slot));
}

Descriptor Encoder::encode(const ColoredCloud& support) {
  if (support.empty()) throw EmptyInputError("cannot encode an empty support");
  nn::Tape t;
  nn::GraphMaps g;
  Var d = forward(t, g, std::span<const ColoredCloud>(&support, 1), false);
  return d.value().row(0).transpose();
}

std::vector<ColoredCloud> instance_supports(const ColoredCloud& cloud, std::span<const FruitInstance> instances,
                                            const EncoderConfig& config, std::uint64_t seed) {
  std::vector<ColoredCloud> out;
  out.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    ColoredCloud s = support(cloud, instances[i].center, config.support_radius);
    if (s.size() > config.max_support_points) {
      std::vector<std::uint32_t> idx(s.size());
      std::iota(idx.begin(), idx.end(), 0u);
      Rng rng = make_rng(seed, "support/" + std::to_string(i));
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(config.max_support_points);
      std::sort(idx.begin(), idx.end());
      s = s.select(idx);
    }
    out.push_back(std::move(s));
  }
  return out;
}

DescriptorSet encode_all(const ColoredCloud& cloud, std::span<const FruitInstance> instances, Encoder& encoder,
                         const std::string& tag) {
  DescriptorSet set;
  set.tag = tag;
  const auto z = static_cast<Eigen::Index>(encoder.config().descriptor_dim());
  set.values = Matrix::Zero(static_cast<Eigen::Index>(instances.size()), z);
  for (const auto& inst : instances) set.instance_ids.push_back(inst.id);
  if (instances.empty()) return set;
  const auto supports = instance_supports(cloud, instances, encoder.config(), encoder.config().rng_seed);
  for (std::size_t i = 0; i < supports.size(); ++i) {
    if (supports[i].empty()) {
      std::cerr << "warning: instance " << i << " (id " << instances[i].id
                << ") has an empty support; using a zero descriptor\n";
    }
  }
  nn::Tape t;
  nn::GraphMaps g;
  set.values = encoder.forward(t, g, supports, false).value();
  return set;
}

namespace {

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

void save_descriptors(const std::filesystem::path& path, const DescriptorSet& set, const EncoderConfig& config) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "instance_id";
  for (Eigen::Index k = 0; k < set.values.cols(); ++k) out << ",d" << k;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < set.size(); ++i) {
    out << set.instance_ids[i];
    for (Eigen::Index k = 0; k < set.values.cols(); ++k) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), set.values(static_cast<Eigen::Index>(i), k));
      out << ',' << std::string_view(buf, static_cast<std::size_t>(end - buf));
    }
    out << '\n';
  }
  const std::string cfg = to_json(config).dump();
  std::ofstream side(path.string() + ".json");
  if (!side) throw IoError("cannot write '" + path.string() + ".json'");
  side << nlohmann::json{{"schema_version", 1}, {"encoder", to_json(config)}, {"config_hash", fnv_hex(cfg)},
                         {"tag", set.tag}, {"count", set.size()}}
              .dump(2)
       << '\n';
}

}  // namespace fruitreid
