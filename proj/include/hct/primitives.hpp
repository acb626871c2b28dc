#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "hct/autograd.hpp"
#include "hct/tensor.hpp"

// Differentiable building blocks. Image tensors are NCHW, token tensors are
// (batch, tokens, dim). Each Var overload records its own backward pass.
namespace hct::nn {

using ad::Var;

// ---- plain (non-differentiable) helpers ----------------------------------

/// Max-subtracted softmax of a single vector.
std::vector<double> softmax(std::span<const double> logits);

/// Softmax of every row of a rank-2 tensor.
Tensor softmax_rows(const Tensor& logits);

/// Align-corners bilinear resize over the two trailing axes. Returns an exact
/// copy when the size is unchanged; a source axis of length < 2 can not be
/// resized.
Tensor bilinear_resize(const Tensor& map, std::size_t target_h, std::size_t target_w);

/// (D, h, w) -> (h*w, D) or (B, D, h, w) -> (B, h*w, D); token r*w + c holds cell (r, c).
Tensor flatten_to_tokens(const Tensor& map);

/// Inverse of flatten_to_tokens: (N, D) -> (D, h, w) or (B, N, D) -> (B, D, h, w).
Tensor tokens_to_map(const Tensor& tokens, std::size_t h, std::size_t w);

/// N(0, sigma^2) truncated to [-2 sigma, 2 sigma] by rejection.
Tensor trunc_normal(Shape shape, double sigma, std::mt19937_64& rng);

// ---- differentiable ops ----------------------------------------------------

/// Cross-correlation; `bias` may be an empty Var. Output spatial size is
/// floor((H + 2 pad - k) / stride) + 1.
Var conv2d(const Var& input, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad);

/// y = x W^T + b over the last axis; weight is (out, in), bias may be empty.
Var linear(const Var& x, const Var& weight, const Var& bias);

Var add(const Var& a, const Var& b);

/// (B, N, D) + (N, D) broadcast over the batch.
Var add_positional(const Var& tokens, const Var& table);

Var gelu(const Var& x);

/// Per-sample standardization over (C, H, W) with per-channel affine.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Per-token standardization over the last axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

/// Scaled dot-product attention for each head on (B, N, D) projections. When
/// `weights` is non-null it receives one (N, N) matrix per (batch, head).
Var attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads,
              std::vector<Tensor>* weights = nullptr);

/// Softmax over axis 1 of an NCHW tensor (pixel-wise class probabilities).
Var channel_softmax(const Var& logits);

Var bilinear_resize(const Var& map, std::size_t target_h, std::size_t target_w);

Var flatten_to_tokens(const Var& map);
Var tokens_to_map(const Var& tokens, std::size_t h, std::size_t w);

/// Concatenation along `axis`; all other axes must agree.
Var concat(const std::vector<Var>& parts, std::size_t axis);

/// Contiguous sub-range [start, start + length) of `axis`.
Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length);

/// Element-wise arithmetic mean of equally shaped tensors.
Var mean_of(const std::vector<Var>& parts);

/// Weighted sum of all elements with fixed weights (a scalar Var).
Var weighted_sum(const Var& x, const Tensor& weights);

}  // namespace hct::nn
