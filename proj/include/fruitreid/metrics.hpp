#pragma once

#include "fruitreid/cloud.hpp"

#include <json.hpp>

#include <filesystem>
#include <vector>

namespace fruitreid {

/// |a ∩ b| / |a ∪ b| for sorted index sets. Two empty sets give 0.
double iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

/// Pairwise instance IoU, pred x gt.
Eigen::MatrixXd instance_iou(const SceneAnnotation& pred, const SceneAnnotation& gt);

struct InstancePair {
  int pred = 0;
  int gt = 0;
  double iou = 0.0;
};

struct InstanceMatching {
  std::vector<InstancePair> tp;
  std::vector<int> fp;  // unmatched prediction indices
  std::vector<int> fn;  // unmatched ground-truth indices
};

/// One-to-one pairing of instances with IoU >= threshold, highest IoU first
/// (ties: lower pred index, then lower gt index). Above 0.5 the pairing is
/// unique regardless of order.
InstanceMatching match_instances(const SceneAnnotation& pred, const SceneAnnotation& gt,
                                 double iou_threshold);

struct ClassQuality {
  double iou = 0.0;           // mean IoU over true positives
  double semantic_iou = 0.0;  // point-wise IoU of the class masks
  double rq = 0.0;
  double sq = 0.0;
  double pq = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  /// Set when the class has no TP, FP or FN; the ratios are then 0.
  bool degenerate = false;
};

struct PanopticReport {
  ClassQuality background;
  ClassQuality fruit;
  ClassQuality average;  // unweighted class mean (counts summed)
};

/// Fruit is a thing class (one segment per instance); background is one
/// stuff segment per scene.
PanopticReport panoptic_quality(const SceneAnnotation& pred, const SceneAnnotation& gt,
                                double iou_threshold = 0.5);

/// For each ground-truth instance, the predicted instance whose identity it
/// adopts (-1 if none exceeds the threshold). A prediction claimed by
/// several ground-truth instances goes to the one with the highest IoU.
std::vector<int> adopt_predictions(const SceneAnnotation& pred, const SceneAnnotation& gt,
                                   double iou_threshold);

struct TransferResult {
  std::vector<int> adopted_current;   // gt_t index -> pred_t index or -1
  std::vector<int> adopted_previous;  // gt_prev index -> pred_prev index or -1
  /// Ground-truth association over the predicted time-t instances, pointing
  /// at predicted time-(t-1) instances.
  TemporalAssociation association;
};

/// ID-transfer protocol: predicted instances inherit ground-truth identity
/// through adoption; predictions adopted by nobody become negatives.
TransferResult transfer_ids(const SceneAnnotation& pred_current, const SceneAnnotation& gt_current,
                            const SceneAnnotation& pred_previous, const SceneAnnotation& gt_previous,
                            const TemporalAssociation& gt_association, double iou_threshold);

struct MatchConfusion {
  std::size_t cm = 0;  // correct match
  std::size_t mm = 0;  // wrong partner
  std::size_t fm = 0;  // matched a fruit that has no partner
  std::size_t tn = 0;  // correctly left unmatched
  std::size_t fn = 0;  // missed a partner

  std::size_t total() const { return cm + mm + fm + tn + fn; }
  MatchConfusion& operator+=(const MatchConfusion& o);
};

MatchConfusion matching_confusion(const TemporalAssociation& pred, const TemporalAssociation& gt);

struct F1Report {
  double f1p = 0.0;
  double f1n = 0.0;
  double mf1 = 0.0;
  bool f1p_degenerate = false;
  bool f1n_degenerate = false;
};

F1Report f1_scores(const MatchConfusion& c);

struct ThresholdResult {
  double threshold = 0.0;
  MatchConfusion confusion;
  F1Report f1;
};

/// Parses "start:stop:step" (inclusive stop, tolerant of float drift).
std::vector<double> parse_grid(const std::string& spec);

nlohmann::json to_json(const ClassQuality& q);
nlohmann::json to_json(const PanopticReport& r);
nlohmann::json to_json(const MatchConfusion& c);
nlohmann::json to_json(const F1Report& f);
nlohmann::json to_json(const std::vector<ThresholdResult>& rows);

/// Table layouts: one row per class, one row per threshold.
void write_panoptic_csv(const std::filesystem::path& path, const PanopticReport& r);
void write_matching_csv(const std::filesystem::path& path, const std::vector<ThresholdResult>& rows);

}  // namespace fruitreid
