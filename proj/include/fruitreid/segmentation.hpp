#pragma once

#include "fruitreid/cloud.hpp"
#include "fruitreid/metrics.hpp"
#include "fruitreid/nn/layers.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <memory>

namespace fruitreid {

struct SegNetConfig {
  double voxel_size = 0.002;
  /// Encoder channels per level; the decoder mirrors them.
  std::vector<int> channels{8, 16, 32, 64};
  int classes = 2;
  int offset_dim = 3;
  /// Offset head output is multiplied by this, so unit activations span a
  /// fruit radius.
  double offset_scale = 0.01;
  double bandwidth = 0.01125;
  /// Clusters with fewer points are returned to the background.
  int min_points = 10;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SegNetConfig& c);
SegNetConfig seg_config_from_json(const nlohmann::json& j);

struct SegPrediction {
  nn::Matrix class_probs;  // n x classes
  nn::Matrix offsets;      // n x 3, meters

  std::size_t size() const { return static_cast<std::size_t>(class_probs.rows()); }
};

/// Voxelization and kernel maps of one cloud, reusable across training
/// steps on the same geometry.
struct SegStructure {
  SparseVoxelTensor voxels;
  VoxelMap map;
  int levels = 0;
  std::vector<KernelMap> same;     // stride-1 map per level
  std::vector<KernelMap> down;     // level l -> l+1
  std::vector<std::vector<std::int32_t>> parent;  // level l row -> level l+1 row
};

/// Sparse U-Net with a class head and an offset head.
class SegNet {
 public:
  explicit SegNet(SegNetConfig config);
  SegNet(SegNetConfig config, nn::ParamStore store);

  const SegNetConfig& config() const { return config_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  std::shared_ptr<const SegStructure> structure(const ColoredCloud& cloud) const;

  struct Output {
    nn::Var probs;    // per point
    nn::Var offsets;  // per point, meters
  };
  Output forward(nn::Tape& tape, const SegStructure& s, bool train);

  /// Eval-mode prediction. Throws EmptyInputError on an empty cloud.
  SegPrediction predict(const ColoredCloud& cloud);

 private:
  SegNetConfig config_;
  nn::ParamStore store_;
};

struct ShiftedPoints {
  std::vector<Vec3> points;
  std::vector<std::uint32_t> source;  // index into the original cloud
};

/// Points with fruit probability > 0.5, moved by their predicted offset.
ShiftedPoints shift_points(const ColoredCloud& cloud, const SegPrediction& pred);

struct ClusterResult {
  std::vector<int> cluster_id;  // per input point
  std::vector<Vec3> modes;
};

/// Flat-kernel mean shift. Seeds are the input points averaged per cell of
/// a bandwidth/2 grid; each seed moves to the mean of the points within one
/// bandwidth until the step falls below 1e-5 bandwidth (max 300 steps).
/// Converged modes are kept largest basin first, dropping any mode within
/// bandwidth/2 of a kept one; points go to the nearest kept mode.
ClusterResult mean_shift(std::span<const Vec3> points, double bandwidth);

/// Groups the original points by cluster; clusters smaller than min_points
/// join the background. Instances are ordered by cluster id.
SceneAnnotation assemble_instances(const ColoredCloud& cloud, const SegPrediction& pred,
                                   const ShiftedPoints& shifted, const ClusterResult& clusters,
                                   int min_points = 10);

/// Prediction -> shift -> cluster -> assemble.
SceneAnnotation segment_instances(const ColoredCloud& cloud, const SegPrediction& pred, double bandwidth,
                                  int min_points = 10);

/// Prediction carrying the ground-truth semantics and center offsets.
SegPrediction oracle_prediction(const ColoredCloud& cloud, const SceneAnnotation& gt);

struct InsLossWeights {
  double ce = 2.0;
  double lovasz = 10.0;
  double offset = 10.0;
};

/// L_sem + w_off L_off with L_sem = w_ce CE + w_lov Lovasz over all points
/// and L_off the mean L1 offset error over ground-truth fruit points.
nn::Var loss_ins(nn::Var probs, nn::Var offsets, const ColoredCloud& cloud, const SceneAnnotation& gt,
                 const InsLossWeights& w);

struct SegTrainConfig {
  int epochs = 200;
  int steps_per_epoch = 1;
  double lr = 0.01;
  double lr_decay = 0.97;
  InsLossWeights weights;
  bool augment = false;
  /// Validate every this many epochs (and at the last).
  int eval_every = 10;
  std::uint64_t seed = 0;
};

struct SegEpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double val_pq = -1.0;  // -1 when not evaluated this epoch
};

struct SegTrainResult {
  SegNet model;
  std::vector<SegEpochLog> log;
  int best_epoch = -1;  // -1: the initial model
  double best_val_pq = -1.0;
};

/// Adam on loss_ins with lr = lr0 * decay^epoch. Returns the checkpoint
/// with the best validation fruit PQ (the training scenes when
/// `validation` is empty). Throws DivergenceError on a non-finite loss.
SegTrainResult train_segmentation(std::span<const std::pair<ColoredCloud, SceneAnnotation>> train,
                                  std::span<const std::pair<ColoredCloud, SceneAnnotation>> validation,
                                  const SegNetConfig& model_config, const SegTrainConfig& config,
                                  const std::function<void(const SegEpochLog&)>& on_epoch = {});

/// Mean fruit PQ of the full pipeline over the scenes.
double evaluate_pq(SegNet& model, std::span<const std::pair<ColoredCloud, SceneAnnotation>> scenes,
                   double bandwidth);

struct BandwidthTuning {
  double best = 0.0;
  std::vector<std::pair<double, double>> table;  // (bandwidth, PQ)
};

/// Argmax PQ over the candidates; ties go to the smaller bandwidth.
BandwidthTuning tune_bandwidth(SegNet& model, std::span<const std::pair<ColoredCloud, SceneAnnotation>> scenes,
                               std::span<const double> candidates);

void save_segnet(const std::filesystem::path& path, const SegNet& model);
SegNet load_segnet(const std::filesystem::path& path);

}  // namespace fruitreid
