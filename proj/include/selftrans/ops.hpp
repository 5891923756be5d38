#pragma once

#include <cstdint>
#include <vector>

#include "selftrans/tensor.hpp"

// Differentiable tensor operations. Shapes are checked eagerly and mismatches
// raise ShapeError. Reductions accumulate in double.
namespace st::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
/// wa * a + wb * b. With wa = 1, wb = 0 the result equals a bit-for-bit.
Tensor weighted_sum(const Tensor& a, float wa, const Tensor& b, float wb);

Tensor exp(const Tensor& a);
Tensor silu(const Tensor& a);
/// tanh-approximated GELU.
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);

/// Softmax over the last axis.
Tensor softmax(const Tensor& a);
/// Parameter-free layer norm over the last axis.
Tensor layer_norm(const Tensor& a, float eps = 1e-6f);

/// x[..., in] * W[out, in]^T + b[out]. `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Batched matmul over the leading axis: a[G, M, K] * b[G, K, N] with
/// optional transposes of the trailing two axes.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

/// x[B, N, D] * (1 + scale[B, D]) + shift[B, D].
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);
/// x[B, N, D] + gate[B, D] * y[B, N, D].
Tensor gated_add(const Tensor& x, const Tensor& gate, const Tensor& y);
/// x[B, ...rest] + v[...rest], broadcasting v over the leading axis.
Tensor add_broadcast(const Tensor& x, const Tensor& v);

/// out.flat[i] = x.flat[index[i]]; backward scatters-adds.
Tensor gather(const Tensor& x, std::vector<int64_t> index, Shape out_shape);
/// x[..., start:start+len] on the last axis.
Tensor slice_last(const Tensor& x, int64_t start, int64_t len);
/// Rows of table[R, D] selected by `rows`; output [rows.size(), D].
Tensor embedding(const Tensor& table, const std::vector<int64_t>& rows);

/// Mean of squared differences, scalar result.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);
/// Mean negative log-likelihood of logits[B, K] at the given labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);

/// x[B, C, H, W] conv w[O, C, k, k] + b[O] (b may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);
Tensor upsample_nearest2x(const Tensor& x);
/// Mean over spatial axes: [B, C, H, W] -> [B, C].
Tensor global_avg_pool(const Tensor& x);
/// Mean over tokens: [B, N, D] -> [B, D].
Tensor mean_tokens(const Tensor& x);

}  // namespace st::ops
