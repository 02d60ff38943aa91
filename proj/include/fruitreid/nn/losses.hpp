#pragma once

#include "fruitreid/nn/ops.hpp"

#include <span>

namespace fruitreid::nn {

enum class PredKind { Logits, Probabilities };
enum class Reduction { Sum, Mean };

inline constexpr double kLogClamp = 1e-12;

/// -sum target * log(pred) per row, with log clamped at 1e-12. Logits are
/// passed through a row softmax first. Mean divides by the row count.
Var cross_entropy(Var pred, const Matrix& target, PredKind kind, Reduction reduction);

/// Lovasz-softmax: Lovasz extension of the Jaccard loss per class, averaged
/// over the classes present in `labels`. probs is n x C.
Var lovasz_softmax(Var probs, std::span<const int> labels);

/// Mean over `rows` of the L1 distance between pred[row] and target row.
/// target has one row per entry of `rows`.
Var mean_l1_rows(Var pred, const Matrix& target, std::vector<std::int32_t> rows);

}  // namespace fruitreid::nn
