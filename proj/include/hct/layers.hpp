#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hct/param_store.hpp"
#include "hct/primitives.hpp"

// Parameterized layers. Each `create` registers its parameters under
// `prefix` in a ParamStore; the layer keeps shared handles to them.
namespace hct::nn {

struct Conv2d {
  Var weight, bias;
  std::size_t stride = 1, pad = 0;

  /// He-normal weights, zero bias.
  static Conv2d create(ParamStore& store, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
                       std::size_t kernel, std::size_t stride, std::size_t pad, std::mt19937_64& rng);
  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct GroupNorm {
  Var gamma, beta;

  static GroupNorm create(ParamStore& store, const std::string& prefix, std::size_t channels);
  Var operator()(const Var& x) const { return group_norm(x, gamma, beta); }
};

struct LayerNorm {
  Var gamma, beta;

  static LayerNorm create(ParamStore& store, const std::string& prefix, std::size_t dim);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

struct Linear {
  Var weight, bias;

  /// Xavier-uniform weights, zero bias.
  static Linear create(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                       std::mt19937_64& rng);
  Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

/// y = gelu(F(x) + shortcut(x)), F = conv3x3(stride) -> norm -> gelu -> conv3x3 -> norm.
/// The shortcut is the identity when shapes are preserved, a strided 1x1 conv otherwise.
struct ResidualBlock {
  Conv2d conv1, conv2;
  GroupNorm norm1, norm2;
  std::optional<Conv2d> shortcut;

  static ResidualBlock create(ParamStore& store, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
                              std::size_t stride, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
};

/// Multi-head self-attention with Q/K/V/output projections.
struct MultiHeadAttention {
  Linear query, key, value, output;
  std::size_t n_heads = 1;

  static MultiHeadAttention create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                   std::size_t n_heads, std::mt19937_64& rng);
  Var operator()(const Var& x, std::vector<Tensor>* weights = nullptr) const;
};

/// linear(D -> 4D) -> gelu -> linear(4D -> D).
struct Mlp {
  Linear fc1, fc2;

  static Mlp create(ParamStore& store, const std::string& prefix, std::size_t dim, std::mt19937_64& rng);
  Var operator()(const Var& x) const { return fc2(gelu(fc1(x))); }
};

/// Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x)).
struct TransformerModule {
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Mlp mlp;

  static TransformerModule create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                  std::size_t n_heads, std::mt19937_64& rng);
  Var operator()(const Var& x, std::vector<Tensor>* weights = nullptr) const;

  /// Zeroes every MSA and MLP weight and bias, making the block the identity.
  void zero_sub_blocks() const;
};

/// Sequential stack of transformer modules.
struct TransformerStack {
  std::vector<TransformerModule> layers;

  static TransformerStack create(ParamStore& store, const std::string& prefix, std::size_t depth, std::size_t dim,
                                 std::size_t n_heads, std::mt19937_64& rng);
  Var operator()(Var x, std::vector<Tensor>* weights = nullptr) const;
  void zero_sub_blocks() const;
};

/// Fills every value of a parameter with zero.
void zero_parameter(const Var& param);

}  // namespace hct::nn
