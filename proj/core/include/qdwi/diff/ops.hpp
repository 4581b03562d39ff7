#pragma once

#include <optional>

#include "qdwi/diff/graph.hpp"

// Differentiable primitives. Image tensors are [N, C, H, W]; feature vectors
// are [N, F]; reductions to a scalar return shape [1].
namespace qdwi::diff {

/// 2D cross-correlation with zero padding. weight is [O, C, K, K], bias [O].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int pad);

/// Nearest-neighbour x2 spatial upsampling.
template <typename T>
Var<T> upsample2x(const Var<T>& x);

/// y = x * W^T + b with x [N, in], W [out, in], b [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias);

/// Per-sample, per-channel standardisation over spatial positions with
/// variance stabiliser eps: (h - mean) / sqrt(var + eps).
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps);

/// y[n,c,:,:] = gamma[n,c] * x[n,c,:,:] + beta[n,c].
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope);
template <typename T>
Var<T> tanh(const Var<T>& x);
/// Clamp with zero gradient outside [lo, hi].
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi);
/// Clamp in the forward pass, identity gradient in the backward pass.
template <typename T>
Var<T> clamp_straight_through(const Var<T>& x, T lo, T hi);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T s);
template <typename T>
Var<T> add_scalar(const Var<T>& a, T s);
template <typename T>
Var<T> square(const Var<T>& a);
template <typename T>
Var<T> abs(const Var<T>& a);

/// Concatenate two [N, *, H, W] tensors along the channel axis.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
/// [N, C, H, W] -> [N, C], mean over H and W.
template <typename T>
Var<T> spatial_mean(const Var<T>& x);
/// [N, C, H, W] x [N, C] -> [N, 1, H, W], sum over channels of x * w.
template <typename T>
Var<T> channel_dot(const Var<T>& x, const Var<T>& w);
/// [N, C] x [N, C] -> [N, 1].
template <typename T>
Var<T> row_dot(const Var<T>& a, const Var<T>& b);
/// Concatenate along the batch (first) axis.
template <typename T>
Var<T> concat_batch(const Var<T>& a, const Var<T>& b);
/// Rows [begin, end) along the batch (first) axis.
template <typename T>
Var<T> slice_batch(const Var<T>& x, int begin, int end);
/// Columns [begin, end) of an [N, K] tensor.
template <typename T>
Var<T> slice_cols(const Var<T>& x, int begin, int end);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);

/// Same value, cut from the graph.
template <typename T>
Var<T> detach(const Var<T>& a);

}  // namespace qdwi::diff
