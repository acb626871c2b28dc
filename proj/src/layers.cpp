#include "hct/layers.hpp"

#include <cmath>

#include "hct/errors.hpp"

namespace hct::nn {

Conv2d Conv2d::create(ParamStore& store, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
                      std::size_t kernel, std::size_t stride, std::size_t pad, std::mt19937_64& rng) {
  Tensor w({out_ch, in_ch, kernel, kernel});
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in_ch * kernel * kernel)));
  for (auto& v : w.values()) v = dist(rng);
  Conv2d c;
  c.weight = store.add(prefix + ".weight", std::move(w));
  c.bias = store.add(prefix + ".bias", Tensor({out_ch}, 0.0));
  c.stride = stride;
  c.pad = pad;
  return c;
}

GroupNorm GroupNorm::create(ParamStore& store, const std::string& prefix, std::size_t channels) {
  return {store.add(prefix + ".gamma", Tensor({channels}, 1.0)), store.add(prefix + ".beta", Tensor({channels}, 0.0))};
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& prefix, std::size_t dim) {
  return {store.add(prefix + ".gamma", Tensor({dim}, 1.0)), store.add(prefix + ".beta", Tensor({dim}, 0.0))};
}

Linear Linear::create(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                      std::mt19937_64& rng) {
  Tensor w({out_dim, in_dim});
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : w.values()) v = dist(rng);
  return {store.add(prefix + ".weight", std::move(w)), store.add(prefix + ".bias", Tensor({out_dim}, 0.0))};
}

ResidualBlock ResidualBlock::create(ParamStore& store, const std::string& prefix, std::size_t in_ch,
                                    std::size_t out_ch, std::size_t stride, std::mt19937_64& rng) {
  ResidualBlock b;
  b.conv1 = Conv2d::create(store, prefix + ".conv1", in_ch, out_ch, 3, stride, 1, rng);
  b.norm1 = GroupNorm::create(store, prefix + ".norm1", out_ch);
  b.conv2 = Conv2d::create(store, prefix + ".conv2", out_ch, out_ch, 3, 1, 1, rng);
  b.norm2 = GroupNorm::create(store, prefix + ".norm2", out_ch);
  if (stride != 1 || in_ch != out_ch) {
    b.shortcut = Conv2d::create(store, prefix + ".shortcut", in_ch, out_ch, 1, stride, 0, rng);
  }
  return b;
}

Var ResidualBlock::operator()(const Var& x) const {
  Var f = norm2(conv2(gelu(norm1(conv1(x)))));
  Var s = shortcut ? (*shortcut)(x) : x;
  return gelu(add(f, s));
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                              std::size_t n_heads, std::mt19937_64& rng) {
  if (n_heads == 0 || dim % n_heads != 0) {
    throw ConfigError("embedding dim " + std::to_string(dim) + " not divisible by " + std::to_string(n_heads) +
                      " heads");
  }
  MultiHeadAttention m;
  m.query = Linear::create(store, prefix + ".query", dim, dim, rng);
  m.key = Linear::create(store, prefix + ".key", dim, dim, rng);
  m.value = Linear::create(store, prefix + ".value", dim, dim, rng);
  m.output = Linear::create(store, prefix + ".output", dim, dim, rng);
  m.n_heads = n_heads;
  return m;
}

Var MultiHeadAttention::operator()(const Var& x, std::vector<Tensor>* weights) const {
  return output(attention(query(x), key(x), value(x), n_heads, weights));
}

Mlp Mlp::create(ParamStore& store, const std::string& prefix, std::size_t dim, std::mt19937_64& rng) {
  return {Linear::create(store, prefix + ".fc1", dim, 4 * dim, rng),
          Linear::create(store, prefix + ".fc2", 4 * dim, dim, rng)};
}

TransformerModule TransformerModule::create(ParamStore& store, const std::string& prefix, std::size_t dim,
                                            std::size_t n_heads, std::mt19937_64& rng) {
  TransformerModule t;
  t.norm1 = LayerNorm::create(store, prefix + ".norm1", dim);
  t.attn = MultiHeadAttention::create(store, prefix + ".attn", dim, n_heads, rng);
  t.norm2 = LayerNorm::create(store, prefix + ".norm2", dim);
  t.mlp = Mlp::create(store, prefix + ".mlp", dim, rng);
  return t;
}

Var TransformerModule::operator()(const Var& x, std::vector<Tensor>* weights) const {
  Var h = add(x, attn(norm1(x), weights));
  return add(h, mlp(norm2(h)));
}

void zero_parameter(const Var& param) {
  Var handle = param;
  handle.mutable_value().fill(0.0);
}

void TransformerModule::zero_sub_blocks() const {
  for (const Linear* l : {&attn.query, &attn.key, &attn.value, &attn.output, &mlp.fc1, &mlp.fc2}) {
    zero_parameter(l->weight);
    zero_parameter(l->bias);
  }
}

TransformerStack TransformerStack::create(ParamStore& store, const std::string& prefix, std::size_t depth,
                                          std::size_t dim, std::size_t n_heads, std::mt19937_64& rng) {
  TransformerStack s;
  for (std::size_t i = 0; i < depth; ++i) {
    s.layers.push_back(TransformerModule::create(store, prefix + "." + std::to_string(i), dim, n_heads, rng));
  }
  return s;
}

Var TransformerStack::operator()(Var x, std::vector<Tensor>* weights) const {
  for (const auto& layer : layers) x = layer(x, weights);
  return x;
}

void TransformerStack::zero_sub_blocks() const {
  for (const auto& layer : layers) layer.zero_sub_blocks();
}

}  // namespace hct::nn
