#pragma once

#include "fruitreid/nn/ops.hpp"

#include <deque>
#include <string>

namespace fruitreid::nn {

// Parameterized building blocks. Each looks up (or lazily creates) its
// parameters in the store under `name`, so a model is a ParamStore plus the
// sequence of calls that reads it. Initialization is uniform in
// +-sqrt(1/fan_in); BN gain 1, bias 0, running mean 0, running var 1.

Var linear_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, Eigen::Index out);

Var batch_norm_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, bool train);

/// Owns the kernel maps of one forward pass so they outlive backward().
/// Deque storage keeps references stable as maps are added.
struct GraphMaps {
  std::deque<KernelMap> maps;
  const KernelMap& add(KernelMap m) { return maps.emplace_back(std::move(m)); }
};

/// The KernelMap must outlive the tape's backward pass.
Var conv_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, const KernelMap& map,
               Eigen::Index out);

Var layer_norm_layer(Tape& tape, ParamStore& store, const std::string& name, Var x);

/// Post-norm transformer encoder layer: self-attention, residual, layer
/// norm, then a ReLU feedforward of width ff_dim, residual, layer norm.
/// Attention is confined to each row range in `segments`.
Var encoder_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, int heads,
                  Eigen::Index ff_dim, std::vector<RowRange> segments);

/// Plain Adam update over every parameter in the store.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};
void adam_step(ParamStore& store, const AdamConfig& config, long step);

}  // namespace fruitreid::nn
