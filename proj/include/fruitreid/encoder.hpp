#pragma once

#include "fruitreid/cloud.hpp"
#include "fruitreid/nn/layers.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace fruitreid {

struct EncoderConfig {
  double support_radius = 0.2;
  double voxel_size = 5e-4;
  int blocks = 4;
  /// Stem output followed by one entry per block; the last is z.
  std::vector<int> channels{8, 8, 16, 16, 64};
  /// Supports above this many points are subsampled.
  std::size_t max_support_points = 60000;
  std::uint64_t rng_seed = 0;

  void validate() const;
  int descriptor_dim() const { return channels.back(); }
  /// Support radius and voxel size shrunk for CPU-scale experiments.
  static EncoderConfig desk();
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

using Descriptor = Eigen::VectorXd;

struct DescriptorSet {
  std::vector<int> instance_ids;
  nn::Matrix values;  // one row per instance
  std::string tag;

  std::size_t size() const { return instance_ids.size(); }
};

/// Stem (conv3-BN-ReLU twice), `blocks` residual downsampling blocks and
/// global average pooling. Parameter names start with "enc.".
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);
  Encoder(EncoderConfig config, nn::ParamStore store);

  const EncoderConfig& config() const { return config_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  /// Descriptors of several supports at once, one row each. Empty supports
  /// get a zero row. The maps in `graph` must outlive backward().
  nn::Var forward(nn::Tape& tape, nn::GraphMaps& graph, std::span<const ColoredCloud> supports, bool train);

  /// Eval-mode descriptor. Throws EmptyInputError on an empty support.
  Descriptor encode(const ColoredCloud& support);

 private:
  EncoderConfig config_;
  nn::ParamStore store_;
};

/// Support cloud of every instance, re-centered on its center and capped at
/// max_support_points (deterministic subsample keyed by `seed`).
std::vector<ColoredCloud> instance_supports(const ColoredCloud& cloud, std::span<const FruitInstance> instances,
                                            const EncoderConfig& config, std::uint64_t seed = 0);

/// Eval-mode descriptors in instance order. Empty supports yield a zero
/// descriptor and a warning on stderr.
DescriptorSet encode_all(const ColoredCloud& cloud, std::span<const FruitInstance> instances, Encoder& encoder,
                         const std::string& tag = "");

/// CSV `instance_id,d0..d{z-1}` plus `<path>.json` with the config and its
/// hash.
void save_descriptors(const std::filesystem::path& path, const DescriptorSet& set, const EncoderConfig& config);

}  // namespace fruitreid
