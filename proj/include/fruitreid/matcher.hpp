#pragma once

#include "fruitreid/encoder.hpp"
#include "fruitreid/metrics.hpp"
#include "fruitreid/synth.hpp"

#include <functional>

namespace fruitreid {

struct MatchConfig {
  double max_move = 0.05;  // h
  int token_dim = 512;     // l
  int ff_dim = 1024;
  int heads = 8;
  int n_freq = 6;
  std::uint64_t rng_seed = 0;

  void validate() const;
  /// Narrow transformer for CPU-scale experiments.
  static MatchConfig desk();
};

nlohmann::json to_json(const MatchConfig& c);
MatchConfig match_config_from_json(const nlohmann::json& j);

/// Per axis and frequency k < n_freq: sin(2^k pi x / h), cos(2^k pi x / h),
/// axis-major, then zero padding to out_dim. T is B x 3.
nn::Matrix positional_encoding(const nn::Matrix& T, int out_dim, int n_freq, double max_move);

/// A query rows over B candidates plus the trailing no-match column.
struct ProbMatrix {
  nn::Matrix probs;     // after masking
  nn::Matrix unmasked;  // softmax output

  Eigen::Index queries() const { return probs.rows(); }
  Eigen::Index candidates() const { return probs.cols() - 1; }
};

/// Candidate j of query i is masked when |c_prev[j] - c_cur[i]| > h.
nn::Matrix distance_mask(std::span<const Vec3> current, std::span<const Vec3> previous, double max_move);

/// Linear -> BN -> leaky ReLU -> transformer encoder layer -> BN -> leaky
/// ReLU -> linear, softmax over each query's B+1 tokens. Parameter names
/// start with "match.".
class Matcher {
 public:
  Matcher(MatchConfig config, int descriptor_dim);
  Matcher(MatchConfig config, int descriptor_dim, nn::ParamStore store);

  const MatchConfig& config() const { return config_; }
  int descriptor_dim() const { return z_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  /// Unmasked A x (B+1) probabilities. Every query's tokens are stacked so
  /// train-mode BN normalizes across all of them.
  nn::Var forward(nn::Tape& tape, nn::Var current, nn::Var previous, std::span<const Vec3> current_centers,
                  std::span<const Vec3> previous_centers, bool train);

 private:
  MatchConfig config_;
  int z_;
  nn::ParamStore store_;
};

/// Eval-mode probabilities of one query over the candidates (masked; last
/// entry is no-match). T holds candidate minus query centers.
Eigen::VectorXd match_query(const Descriptor& query, const nn::Matrix& candidates, const nn::Matrix& T,
                            Matcher& matcher);

ProbMatrix batch_match(const nn::Matrix& current, const nn::Matrix& previous, std::span<const Vec3> current_centers,
                       std::span<const Vec3> previous_centers, Matcher& matcher);

/// Repeatedly fixes the largest remaining entry (ties: lower row, then lower
/// column). The no-match column is never retired.
TemporalAssociation greedy_assign(const nn::Matrix& H);

/// One-hot A x (B+1) target; unmatched queries point at the last column.
nn::Matrix association_matrix(const TemporalAssociation& assoc, Eigen::Index candidates);

/// L_ce + lambda_inj (L_row + L_col) on unmasked probabilities.
nn::Var loss_match(nn::Var H, const nn::Matrix& target, double lambda_inj);

nlohmann::json to_json(const ProbMatrix& m);

struct ReidModel {
  Encoder encoder;
  Matcher matcher;

  static ReidModel create(const EncoderConfig& e, const MatchConfig& m);
  TemporalAssociation associate(const Scene& current, const Scene& previous, ProbMatrix* probs = nullptr);
  /// Variant taking clouds plus instance sets directly.
  TemporalAssociation associate(const ColoredCloud& cur_cloud, std::span<const FruitInstance> cur,
                                const ColoredCloud& prev_cloud, std::span<const FruitInstance> prev,
                                ProbMatrix* probs = nullptr);
};

void save_reid(const std::filesystem::path& path, const ReidModel& model);
ReidModel load_reid(const std::filesystem::path& path);
/// Encoder and matcher may live in separate checkpoints (or the same one).
ReidModel load_reid(const std::filesystem::path& encoder_path, const std::filesystem::path& matcher_path);

struct MatchTrainConfig {
  int steps = 500;
  double lr = 3e-4;
  double lambda_inj = 0.08;
  bool augment = true;
  /// Validate every this many steps (and after the last).
  int eval_every = 25;
  /// Stop once validation mF1 reaches this value (> 1 disables).
  double stop_at_mf1 = 2.0;
  std::uint64_t seed = 0;
};

struct MatchStepLog {
  int step = 0;
  double loss = 0.0;
  double train_mf1 = -1.0;  // -1 when not evaluated at this step
  double val_mf1 = -1.0;
};

struct MatchTrainResult {
  ReidModel model;
  std::vector<MatchStepLog> log;
  int best_step = -1;  // -1: the initial model
  double best_val_mf1 = -1.0;
};

/// Pooled mF1 of predicted associations over the pairs.
double evaluate_mf1(ReidModel& model, std::span<const ScenePair> pairs);

/// End-to-end encoder + matcher training, one scene pair per step (cycling).
/// Model selection by validation mF1 (training pairs when `validation` is
/// empty). Throws DivergenceError on a non-finite loss.
MatchTrainResult train_matcher(std::span<const ScenePair> train, std::span<const ScenePair> validation,
                               const EncoderConfig& encoder_config, const MatchConfig& match_config,
                               const MatchTrainConfig& config,
                               const std::function<void(const MatchStepLog&)>& on_step = {});

}  // namespace fruitreid
