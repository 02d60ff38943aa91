#pragma once

#include "fruitreid/nn/tape.hpp"
#include "fruitreid/sparsegrid.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace fruitreid::nn {

/// Half-open row range [begin, end).
struct RowRange {
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
  Eigen::Index size() const { return end - begin; }
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// x + row, with `row` (1 x C) broadcast over every row of x.
Var add_row(Var x, Var row);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
/// x W + b.
Var linear(Var x, Var weight, Var bias);

Var relu(Var x);
Var leaky_relu(Var x, double slope = 0.01);
Var abs(Var x);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
/// Row-major reshape.
Var reshape(Var x, Eigen::Index rows, Eigen::Index cols);
/// out[r] = x[index[r]].
Var gather_rows(Var x, std::vector<std::int32_t> index);

Var sum_all(Var x);
Var mean_all(Var x);
/// n x m -> n x 1.
Var sum_rows(Var x);
/// n x m -> 1 x m.
Var sum_cols(Var x);
/// Channelwise mean of the rows sharing a segment id; returns count x C.
Var segment_mean(Var x, std::vector<std::int32_t> segment, Eigen::Index count);
/// Channelwise mean over all rows (global average pooling).
Var global_avg_pool(Var x);

/// Row-wise softmax with max subtraction.
Var softmax_rows(Var x);
/// Softmax of an n x 1 column taken independently inside each range.
Var softmax_segments(Var column, std::vector<RowRange> segments);

/// Batch normalization over rows. Train mode normalizes with batch
/// statistics and updates the running estimates (momentum 0.1, unbiased
/// variance); eval mode, or a single-row batch, uses the running estimates.
Var batch_norm(Var x, Var gain, Var bias, Matrix& running_mean, Matrix& running_var, bool train,
               double momentum = 0.1, double eps = 1e-5);

/// Per-row normalization over columns.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Sparse convolution: out[o] = sum over occupied pairs (offset k, input i)
/// of features[i] * W_k, with W stored as (volume * C_in) x C_out.
Var sparse_conv(Var features, Var weights, const KernelMap& map);

/// Multi-head scaled dot-product attention restricted to each row range.
/// q, k, v are n x d with d divisible by heads.
Var attention(Var q, Var k, Var v, int heads, std::vector<RowRange> segments);

/// Plain softmax of a vector.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

}  // namespace fruitreid::nn
