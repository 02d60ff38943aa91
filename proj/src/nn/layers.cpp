#include "fruitreid/nn/layers.hpp"

#include <cmath>

namespace fruitreid::nn {

Var linear_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, Eigen::Index out) {
  const Eigen::Index in = x.cols();
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  Var w = tape.param(store.uniform(name + ".weight", in, out, bound));
  Var b = tape.param(store.uniform(name + ".bias", 1, out, bound));
  return linear(x, w, b);
}

Var batch_norm_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, bool train) {
  const Eigen::Index c = x.cols();
  Var gain = tape.param(store.constant(name + ".gain", 1, c, 1.0));
  Var bias = tape.param(store.constant(name + ".bias", 1, c, 0.0));
  Matrix& mean = store.buffer(name + ".running_mean", 1, c, 0.0);
  Matrix& var = store.buffer(name + ".running_var", 1, c, 1.0);
  return batch_norm(x, gain, bias, mean, var, train);
}

Var conv_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, const KernelMap& map,
               Eigen::Index out) {
  const Eigen::Index in = x.cols();
  const auto fan_in = static_cast<double>(static_cast<Eigen::Index>(map.volume()) * in);
  Var w = tape.param(store.uniform(name + ".weight", static_cast<Eigen::Index>(map.volume()) * in, out,
                                   std::sqrt(1.0 / fan_in)));
  return sparse_conv(x, w, map);
}

Var layer_norm_layer(Tape& tape, ParamStore& store, const std::string& name, Var x) {
  const Eigen::Index c = x.cols();
  Var gain = tape.param(store.constant(name + ".gain", 1, c, 1.0));
  Var bias = tape.param(store.constant(name + ".bias", 1, c, 0.0));
  return layer_norm(x, gain, bias);
}

Var encoder_layer(Tape& tape, ParamStore& store, const std::string& name, Var x, int heads,
                  Eigen::Index ff_dim, std::vector<RowRange> segments) {
  const Eigen::Index d = x.cols();
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("encoder layer width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  Var q = linear_layer(tape, store, name + ".attn.q", x, d);
  Var k = linear_layer(tape, store, name + ".attn.k", x, d);
  Var v = linear_layer(tape, store, name + ".attn.v", x, d);
  Var a = attention(q, k, v, heads, std::move(segments));
  Var o = linear_layer(tape, store, name + ".attn.out", a, d);
  Var h = layer_norm_layer(tape, store, name + ".norm1", add(x, o));
  Var f = relu(linear_layer(tape, store, name + ".ff1", h, ff_dim));
  f = linear_layer(tape, store, name + ".ff2", f, d);
  return layer_norm_layer(tape, store, name + ".norm2", add(h, f));
}

void adam_step(ParamStore& store, const AdamConfig& config, long step) {
  if (step < 1) throw ConfigError("adam step index starts at 1");
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (auto& [_, p] : store.params()) {
    if (p.adam_m.size() != p.value.size()) {
      p.adam_m = Matrix::Zero(p.value.rows(), p.value.cols());
      p.adam_v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    if (p.grad.size() != p.value.size()) continue;
    p.adam_m = config.beta1 * p.adam_m + (1.0 - config.beta1) * p.grad;
    p.adam_v = config.beta2 * p.adam_v + (1.0 - config.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= config.lr * (p.adam_m.array() / c1) / ((p.adam_v.array() / c2).sqrt() + config.eps);
  }
}

}  // namespace fruitreid::nn
