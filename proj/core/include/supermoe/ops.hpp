#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "supermoe/tensor.hpp"

namespace supermoe {

// Differentiable operations. All of them record onto the tape of their
// requires-grad inputs (unless a NoGradGuard is active) and propagate
// gradients on backward. Shapes are validated eagerly; errors carry both
// offending shapes.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// y = scale * x + shift
Tensor affine(const Tensor& x, double scale, double shift);
// y = x + s, s a {1} tensor broadcast to every element
Tensor add_broadcast_scalar(const Tensor& x, const Tensor& s);
// y[r,c] = x[r,c] * col[r]
Tensor mul_col(const Tensor& x, const Tensor& col);

Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
// Normalizes along the last axis. gain/bias have that axis's length.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count);

// Rows of `table` selected by id. `context` names the channel in errors.
Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& ids,
                        const std::string& context = "embedding");
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices);
// Inverse of gather for unique indices: places row i of x at row indices[i]
// of a num_rows-tall zero tensor.
Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices, std::int64_t num_rows);
// out[r] = x[r, idx[r]], a {R,1} column.
Tensor select_col_per_row(const Tensor& x, const std::vector<std::int64_t>& idx);

// Column-wise max over the first n_valid rows; returns a {d} vector. Gradient
// flows to the first maximal row per column.
Tensor max_pool_over_time(const Tensor& x, std::int64_t n_valid);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Column means of a rank-2 tensor, returns {C}.
Tensor mean_over_rows(const Tensor& x);
// Mean of targets' negative log softmax rows: standard token cross entropy.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::int64_t>& targets);
// Elementwise numerically stable binary cross entropy on raw scores. Labels
// are treated as constants.
Tensor bce_with_logits(const Tensor& scores, const Tensor& labels);
// (sum_i w_i x_i) / (sum_i w_i); weights are constants, sum must be > 0.
Tensor weighted_mean(const Tensor& x, const std::vector<double>& weights);

Tensor stack_scalars(const std::vector<Tensor>& xs);
Tensor dot(const Tensor& a, const Tensor& b);

// Row argmax with lowest-index tie break. Reports top-2 gaps to the active
// KinkProbe. Not differentiable.
std::vector<std::int64_t> argmax_rows(const Tensor& x);

}  // namespace supermoe
