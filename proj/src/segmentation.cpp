#include "fruitreid/segmentation.hpp"
#include "fruitreid/nn/checkpoint.hpp"
#include "fruitreid/nn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

namespace fruitreid {

using nn::Matrix;
using nn::Var;

void SegNetConfig::validate() const {
  if (!(voxel_size > 0.0)) throw ConfigError("segmentation voxel_size must be positive");
  if (channels.empty()) throw ConfigError("segmentation channel plan is empty");
  for (int c : channels)
    if (c <= 0) throw ConfigError("segmentation channels must be positive");
  if (classes < 2) throw ConfigError("segmentation needs at least two classes");
  if (offset_dim != 3) throw ConfigError("offset head must be 3-dimensional");
  if (!(offset_scale > 0.0)) throw ConfigError("offset_scale must be positive");
  if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
  if (min_points < 1) throw ConfigError("min_points must be >= 1");
}

nlohmann::json to_json(const SegNetConfig& c) {
  return {{"voxel_size", c.voxel_size}, {"channels", c.channels},         {"classes", c.classes},
          {"offset_dim", c.offset_dim}, {"offset_scale", c.offset_scale}, {"bandwidth", c.bandwidth},
          {"min_points", c.min_points}, {"rng_seed", c.rng_seed}};
}

SegNetConfig seg_config_from_json(const nlohmann::json& j) {
  SegNetConfig c;
  try {
    c.voxel_size = j.value("voxel_size", c.voxel_size);
    c.channels = j.value("channels", c.channels);
    c.classes = j.value("classes", c.classes);
    c.offset_dim = j.value("offset_dim", c.offset_dim);
    c.offset_scale = j.value("offset_scale", c.offset_scale);
    c.bandwidth = j.value("bandwidth", c.bandwidth);
    c.min_points = j.value("min_points", c.min_points);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("segmentation config: ") + e.what());
  }
  c.validate();
  return c;
}

SegNet::SegNet(SegNetConfig config)
    : config_(std::move(config)), store_(derive_seed(config_.rng_seed, "init/segnet")) {
  config_.validate();
}

SegNet::SegNet(SegNetConfig config, nn::ParamStore store) : config_(std::move(config)), store_(std::move(store)) {
  config_.validate();
}

std::shared_ptr<const SegStructure> SegNet::structure(const ColoredCloud& cloud) const {
  if (cloud.empty()) throw EmptyInputError("cannot segment an empty cloud");
  auto s = std::make_shared<SegStructure>();
  std::tie(s->voxels, s->map) = voxelize(cloud, config_.voxel_size);
  s->levels = static_cast<int>(config_.channels.size());
  std::vector<VoxelCoord> coords = s->voxels.coords;
  for (int l = 0; l < s->levels; ++l) {
    const int stride = 1 << l;
    s->same.push_back(kernel_neighbors(coords, stride, 3, 1));
    if (l + 1 < s->levels) {
      s->down.push_back(kernel_neighbors(coords, stride, 3, 2));
      s->parent.push_back(parent_indices(coords, stride, s->down.back().out_coords));
      coords = s->down.back().out_coords;
    }
  }
  return s;
}

namespace {

Var conv_bn_relu(nn::Tape& t, nn::ParamStore& store, const std::string& name, Var x, const KernelMap& map,
                 Eigen::Index out, bool train) {
  Var h = nn::conv_layer(t, store, name + ".conv", x, map, out);
  return nn::relu(nn::batch_norm_layer(t, store, name + ".bn", h, train));
}

}  // namespace

SegNet::Output SegNet::forward(nn::Tape& t, const SegStructure& s, bool train) {
  const auto& ch = config_.channels;
  const int levels = s.levels;
  std::vector<Var> skips(static_cast<std::size_t>(levels));
  Var h = t.constant(Matrix(s.voxels.features));
  h = conv_bn_relu(t, store_, "enc0.a", h, s.same[0], ch[0], train);
  h = conv_bn_relu(t, store_, "enc0.b", h, s.same[0], ch[0], train);
  skips[0] = h;
  for (int l = 1; l < levels; ++l) {
    const auto L = static_cast<std::size_t>(l);
    h = conv_bn_relu(t, store_, "down" + std::to_string(l), h, s.down[L - 1], ch[L], train);
    h = conv_bn_relu(t, store_, "enc" + std::to_string(l), h, s.same[L], ch[L], train);
    skips[L] = h;
  }
  for (int l = levels - 2; l >= 0; --l) {
    const auto L = static_cast<std::size_t>(l);
    Var up = nn::gather_rows(h, s.parent[L]);
    h = nn::concat_cols({up, skips[L]});
    const std::string name = "dec" + std::to_string(l);
    h = conv_bn_relu(t, store_, name + ".a", h, s.same[L], ch[L], train);
    h = conv_bn_relu(t, store_, name + ".b", h, s.same[L], ch[L], train);
  }
  Var probs = nn::softmax_rows(nn::linear_layer(t, store_, "head.class", h, config_.classes));
  Var offsets = nn::scale(nn::linear_layer(t, store_, "head.offset", h, 3), config_.offset_scale);
  return {nn::gather_rows(probs, s.map.point_to_voxel), nn::gather_rows(offsets, s.map.point_to_voxel)};
}

SegPrediction SegNet::predict(const ColoredCloud& cloud) {
  auto s = structure(cloud);
  nn::Tape t;
  auto out = forward(t, *s, false);
  return {out.probs.value(), out.offsets.value()};
}

ShiftedPoints shift_points(const ColoredCloud& cloud, const SegPrediction& pred) {
  if (pred.size() != cloud.size()) throw ShapeError("prediction does not match the cloud");
  ShiftedPoints out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (pred.class_probs(r, 1) > 0.5) {
      out.points.push_back(cloud.points[i] + pred.offsets.row(r).transpose());
      out.source.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return out;
}

namespace {

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
  bool operator<(const CellKey& o) const { return std::tie(x, y, z) < std::tie(o.x, o.y, o.z); }
};

struct CellHash {
  std::size_t operator()(const CellKey& c) const noexcept {
    std::uint64_t h = static_cast<std::uint64_t>(c.x) * 0x9e3779b97f4a7c15ULL;
    h ^= static_cast<std::uint64_t>(c.y) + 0x7f4a7c159e3779b9ULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(c.z) + 0x94d049bb133111ebULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

CellKey cell_of(const Vec3& p, double size) {
  return {static_cast<std::int64_t>(std::floor(p.x() / size)), static_cast<std::int64_t>(std::floor(p.y() / size)),
          static_cast<std::int64_t>(std::floor(p.z() / size))};
}

/// Uniform grid with cell size equal to the query radius.
class RadiusGrid {
 public:
  RadiusGrid(std::span<const Vec3> points, double radius) : points_(points), radius_(radius) {
    for (std::size_t i = 0; i < points.size(); ++i) cells_[cell_of(points[i], radius)].push_back(static_cast<std::uint32_t>(i));
  }

  template <typename Fn>
  void for_each_within(const Vec3& q, Fn&& fn) const {
    const CellKey c = cell_of(q, radius_);
    const double r2 = radius_ * radius_;
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find({c.x + dx, c.y + dy, c.z + dz});
          if (it == cells_.end()) continue;
          for (auto i : it->second)
            if ((points_[i] - q).squaredNorm() <= r2) fn(i);
        }
  }

 private:
  std::span<const Vec3> points_;
  double radius_;
  std::unordered_map<CellKey, std::vector<std::uint32_t>, CellHash> cells_;
};

}  // namespace

ClusterResult mean_shift(std::span<const Vec3> points, double bandwidth) {
  if (!(bandwidth > 0.0)) throw ConfigError("mean shift bandwidth must be positive");
  ClusterResult out;
  if (points.empty()) return out;
  const RadiusGrid grid(points, bandwidth);

  // Seeds: mean of the points in each bandwidth/2 cell, in cell order.
  std::map<CellKey, std::pair<Vec3, int>> bins;
  for (const auto& p : points) {
    auto& b = bins.try_emplace(cell_of(p, bandwidth / 2), Vec3::Zero(), 0).first->second;
    b.first += p;
    ++b.second;
  }
  for (auto& [_, b] : bins) b.first /= b.second;
  struct Mode {
    Vec3 at;
    int basin;
  };
  std::vector<Mode> modes;
  const double tol = 1e-5 * bandwidth;
  for (const auto& [_, b] : bins) {
    Vec3 x = b.first;
    for (int it = 0; it < 300; ++it) {
      Vec3 sum = Vec3::Zero();
      int n = 0;
      grid.for_each_within(x, [&](std::uint32_t i) {
        sum += points[i];
        ++n;
      });
      if (n == 0) break;
      const Vec3 next = sum / n;
      const double step = (next - x).norm();
      x = next;
      if (step < tol) break;
    }
    int basin = 0;
    grid.for_each_within(x, [&](std::uint32_t) { ++basin; });
    modes.push_back({x, basin});
  }
  std::stable_sort(modes.begin(), modes.end(), [](const Mode& a, const Mode& b) {
    if (a.basin != b.basin) return a.basin > b.basin;
    return std::tie(a.at.x(), a.at.y(), a.at.z()) < std::tie(b.at.x(), b.at.y(), b.at.z());
  });
  for (const auto& m : modes) {
    bool near = false;
    for (const auto& k : out.modes) near = near || (k - m.at).norm() < bandwidth / 2;
    if (!near) out.modes.push_back(m.at);
  }
  out.cluster_id.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    int best = 0;
    double bd = (points[i] - out.modes[0]).squaredNorm();
    for (std::size_t k = 1; k < out.modes.size(); ++k) {
      const double d = (points[i] - out.modes[k]).squaredNorm();
      if (d < bd) {
        bd = d;
        best = static_cast<int>(k);
      }
    }
    out.cluster_id[i] = best;
  }
  return out;
}

SceneAnnotation assemble_instances(const ColoredCloud& cloud, const SegPrediction& pred,
                                   const ShiftedPoints& shifted, const ClusterResult& clusters, int min_points) {
  if (pred.size() != cloud.size()) throw ShapeError("prediction does not match the cloud");
  if (clusters.cluster_id.size() != shifted.source.size()) throw ShapeError("clusters do not match the shifted points");
  std::vector<int> counts(clusters.modes.size(), 0);
  for (int c : clusters.cluster_id) ++counts[static_cast<std::size_t>(c)];
  // Dense labels over the surviving clusters, in cluster order.
  std::vector<int> relabel(clusters.modes.size(), -1);
  int next = 0;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] >= min_points) relabel[c] = next++;
  std::vector<int> labels(cloud.size(), -1);
  for (std::size_t k = 0; k < shifted.source.size(); ++k) {
    labels[shifted.source[k]] = relabel[static_cast<std::size_t>(clusters.cluster_id[k])];
  }
  return SceneAnnotation::from_labels(cloud, labels);
}

SceneAnnotation segment_instances(const ColoredCloud& cloud, const SegPrediction& pred, double bandwidth,
                                  int min_points) {
  const auto shifted = shift_points(cloud, pred);
  const auto clusters = mean_shift(shifted.points, bandwidth);
  return assemble_instances(cloud, pred, shifted, clusters, min_points);
}

SegPrediction oracle_prediction(const ColoredCloud& cloud, const SceneAnnotation& gt) {
  gt.validate(cloud.size());
  const auto n = static_cast<Eigen::Index>(cloud.size());
  SegPrediction p{Matrix::Zero(n, 2), Matrix::Zero(n, 3)};
  p.class_probs.col(0).setOnes();
  for (const auto& inst : gt.instances) {
    for (auto i : inst.point_indices) {
      p.class_probs(i, 0) = 0.0;
      p.class_probs(i, 1) = 1.0;
      p.offsets.row(i) = (inst.center - cloud.points[i]).transpose();
    }
  }
  return p;
}

Var loss_ins(Var probs, Var offsets, const ColoredCloud& cloud, const SceneAnnotation& gt, const InsLossWeights& w) {
  if (w.ce < 0.0 || w.lovasz < 0.0 || w.offset < 0.0) throw ConfigError("loss weights must be nonnegative");
  const auto n = static_cast<Eigen::Index>(cloud.size());
  if (probs.rows() != n || offsets.rows() != n) throw ShapeError("loss_ins: prediction does not match the cloud");
  gt.validate(cloud.size());
  Matrix onehot = Matrix::Zero(n, probs.cols());
  std::vector<int> labels(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    labels[i] = static_cast<int>(gt.per_point_semantic[i]);
    onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  Var ce = nn::cross_entropy(probs, onehot, nn::PredKind::Probabilities, nn::Reduction::Mean);
  Var lov = nn::lovasz_softmax(probs, labels);
  std::vector<std::int32_t> rows;
  std::vector<Vec3> targets;
  for (const auto& inst : gt.instances)
    for (auto i : inst.point_indices) {
      rows.push_back(static_cast<std::int32_t>(i));
      targets.push_back(inst.center - cloud.points[i]);
    }
  Matrix target(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t r = 0; r < targets.size(); ++r) target.row(static_cast<Eigen::Index>(r)) = targets[r].transpose();
  Var off = nn::mean_l1_rows(offsets, target, std::move(rows));
  return nn::add(nn::add(nn::scale(ce, w.ce), nn::scale(lov, w.lovasz)), nn::scale(off, w.offset));
}

double evaluate_pq(SegNet& model, std::span<const std::pair<ColoredCloud, SceneAnnotation>> scenes, double bandwidth) {
  if (scenes.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [cloud, gt] : scenes) {
    const auto pred = model.predict(cloud);
    const auto inst = segment_instances(cloud, pred, bandwidth, model.config().min_points);
    sum += panoptic_quality(inst, gt).fruit.pq;
  }
  return sum / static_cast<double>(scenes.size());
}

SegTrainResult train_segmentation(std::span<const std::pair<ColoredCloud, SceneAnnotation>> train,
                                  std::span<const std::pair<ColoredCloud, SceneAnnotation>> validation,
                                  const SegNetConfig& model_config, const SegTrainConfig& config,
                                  const std::function<void(const SegEpochLog&)>& on_epoch) {
  if (train.empty()) throw EmptyInputError("segmentation training set is empty");
  if (config.epochs < 0 || config.steps_per_epoch < 1 || config.eval_every < 1) {
    throw ConfigError("epochs >= 0, steps_per_epoch >= 1 and eval_every >= 1 required");
  }
  SegNet model(model_config);
  SegTrainResult result{model, {}, -1, -1.0};
  const auto val = validation.empty() ? train : validation;

  std::vector<std::shared_ptr<const SegStructure>> cached;
  if (!config.augment)
    for (const auto& [cloud, _] : train) cached.push_back(model.structure(cloud));

  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    SegEpochLog entry;
    entry.epoch = epoch;
    entry.lr = config.lr * std::pow(config.lr_decay, epoch);
    double loss_sum = 0.0;
    for (int k = 0; k < config.steps_per_epoch; ++k, ++step) {
      const auto idx = static_cast<std::size_t>(step) % train.size();
      std::shared_ptr<const SegStructure> s;
      ColoredCloud aug_cloud;
      SceneAnnotation aug_ann;
      const ColoredCloud* cloud = &train[idx].first;
      const SceneAnnotation* ann = &train[idx].second;
      if (config.augment) {
        auto a = AugmentConfig::segmentation_preset(derive_seed(config.seed, "augment/" + std::to_string(step)));
        std::tie(aug_cloud, aug_ann) = augment(*cloud, *ann, a);
        cloud = &aug_cloud;
        ann = &aug_ann;
        s = model.structure(*cloud);
      } else {
        s = cached[idx];
      }
      nn::Tape tape;
      auto out = model.forward(tape, *s, true);
      Var loss = loss_ins(out.probs, out.offsets, *cloud, *ann, config.weights);
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        throw DivergenceError("segmentation loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step));
      }
      loss_sum += value;
      model.store().zero_grad();
      tape.backward(loss);
      nn::adam_step(model.store(), {entry.lr}, step + 1);
    }
    entry.loss = loss_sum / config.steps_per_epoch;
    if ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs) {
      entry.val_pq = evaluate_pq(model, val, model.config().bandwidth);
      if (entry.val_pq > result.best_val_pq) {
        result.best_val_pq = entry.val_pq;
        result.best_epoch = epoch;
        result.model = model;
      }
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

BandwidthTuning tune_bandwidth(SegNet& model, std::span<const std::pair<ColoredCloud, SceneAnnotation>> scenes,
                               std::span<const double> candidates) {
  if (candidates.empty()) throw ConfigError("no bandwidth candidates");
  std::vector<double> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  // Predictions do not depend on the bandwidth; compute them once.
  std::vector<SegPrediction> preds;
  for (const auto& [cloud, _] : scenes) preds.push_back(model.predict(cloud));
  BandwidthTuning out;
  double best = -1.0;
  for (double bw : sorted) {
    double sum = 0.0;
    for (std::size_t k = 0; k < scenes.size(); ++k) {
      const auto inst = segment_instances(scenes[k].first, preds[k], bw, model.config().min_points);
      sum += panoptic_quality(inst, scenes[k].second).fruit.pq;
    }
    const double pq = scenes.empty() ? 0.0 : sum / static_cast<double>(scenes.size());
    out.table.emplace_back(bw, pq);
    if (pq > best) {
      best = pq;
      out.best = bw;
    }
  }
  return out;
}

void save_segnet(const std::filesystem::path& path, const SegNet& model) {
  nn::save_checkpoint(path, model.store(), {{"kind", "segnet"}, {"model", to_json(model.config())}});
}

SegNet load_segnet(const std::filesystem::path& path) {
  auto ck = nn::load_checkpoint(path);
  if (ck.config.value("kind", "") != "segnet") {
    throw ShapeError("'" + path.string() + "' is not a segmentation checkpoint");
  }
  return SegNet(seg_config_from_json(ck.config.at("model")), std::move(ck.store));
}

}  // namespace fruitreid
