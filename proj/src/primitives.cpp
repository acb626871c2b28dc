#include "hct/primitives.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "hct/errors.hpp"

namespace hct::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// Interpolation taps along one axis under the align-corners convention.
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Taps make_taps(std::size_t src, std::size_t dst) {
  Taps t;
  t.lo.resize(dst);
  t.hi.resize(dst);
  t.frac.resize(dst);
  const double scale = dst > 1 ? static_cast<double>(src - 1) / static_cast<double>(dst - 1) : 0.0;
  for (std::size_t i = 0; i < dst; ++i) {
    const double pos = static_cast<double>(i) * scale;
    auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo > src - 1) lo = src - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, src - 1);
    t.frac[i] = pos - static_cast<double>(lo);
  }
  return t;
}

void check_resize(std::size_t h, std::size_t w, std::size_t th, std::size_t tw) {
  if (th == 0 || tw == 0) throw DimensionError("bilinear_resize target dims must be positive");
  if ((h != th && h < 2) || (w != tw && w < 2)) {
    throw DimensionError("bilinear_resize needs source dims >= 2 to resize, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
}

// Split a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

// ---- plain helpers ---------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  Tensor out(logits.shape());
  const std::size_t cols = logits.dim(1);
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    auto row = softmax(logits.values().subspan(r * cols, cols));
    std::copy(row.begin(), row.end(), out.data() + r * cols);
  }
  return out;
}

Tensor bilinear_resize(const Tensor& map, std::size_t target_h, std::size_t target_w) {
  if (map.rank() < 2) throw DimensionError("bilinear_resize needs at least 2 axes, got " + to_string(map.shape()));
  const std::size_t h = map.shape()[map.rank() - 2];
  const std::size_t w = map.shape()[map.rank() - 1];
  check_resize(h, w, target_h, target_w);
  if (h == target_h && w == target_w) return map;

  Shape out_shape = map.shape();
  out_shape[out_shape.size() - 2] = target_h;
  out_shape[out_shape.size() - 1] = target_w;
  Tensor out(out_shape);
  const Taps ty = make_taps(h, target_h);
  const Taps tx = make_taps(w, target_w);
  const std::size_t planes = map.size() / (h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = map.data() + p * h * w;
    double* dst = out.data() + p * target_h * target_w;
    for (std::size_t i = 0; i < target_h; ++i) {
      const double fy = ty.frac[i];
      const double* r0 = src + ty.lo[i] * w;
      const double* r1 = src + ty.hi[i] * w;
      for (std::size_t j = 0; j < target_w; ++j) {
        const double fx = tx.frac[j];
        const double top = r0[tx.lo[j]] * (1.0 - fx) + r0[tx.hi[j]] * fx;
        const double bottom = r1[tx.lo[j]] * (1.0 - fx) + r1[tx.hi[j]] * fx;
        dst[i * target_w + j] = top * (1.0 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

Tensor flatten_to_tokens(const Tensor& map) {
  if (map.rank() == 3) {
    Tensor batched = flatten_to_tokens(map.reshaped({1, map.dim(0), map.dim(1), map.dim(2)}));
    return batched.reshaped({batched.dim(1), batched.dim(2)});
  }
  require_rank(map, 4, "flatten_to_tokens");
  const std::size_t b = map.dim(0), d = map.dim(1), hw = map.dim(2) * map.dim(3);
  Tensor out({b, hw, d});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t t = 0; t < hw; ++t) out[(n * hw + t) * d + c] = map[(n * d + c) * hw + t];
  return out;
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t h, std::size_t w) {
  if (tokens.rank() == 2) {
    Tensor batched = tokens_to_map(tokens.reshaped({1, tokens.dim(0), tokens.dim(1)}), h, w);
    return batched.reshaped({batched.dim(1), h, w});
  }
  require_rank(tokens, 3, "tokens_to_map");
  const std::size_t b = tokens.dim(0), n_tok = tokens.dim(1), d = tokens.dim(2);
  if (n_tok != h * w) {
    throw DimensionError("tokens_to_map: " + std::to_string(n_tok) + " tokens cannot fill a " + std::to_string(h) +
                         "x" + std::to_string(w) + " map");
  }
  Tensor out({b, d, h, w});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t t = 0; t < n_tok; ++t)
      for (std::size_t c = 0; c < d; ++c) out[(n * d + c) * n_tok + t] = tokens[(n * n_tok + t) * d + c];
  return out;
}

Tensor trunc_normal(Shape shape, double sigma, std::mt19937_64& rng) {
  Tensor out(std::move(shape));
  std::normal_distribution<double> dist(0.0, sigma);
  const double bound = 2.0 * sigma;
  for (auto& v : out.values()) {
    double s;
    do {
      s = dist(rng);
    } while (s < -bound || s > bound);
    v = s;
  }
  return out;
}

// ---- differentiable ops ----------------------------------------------------

Var conv2d(const Var& input, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad) {
  const Tensor& x = input.value();
  const Tensor& wt = weight.value();
  require_rank(x, 4, "conv2d input");
  require_rank(wt, 4, "conv2d weight");
  if (stride < 1) throw ArgumentError("conv2d stride must be >= 1");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = wt.dim(0), kh = wt.dim(2), kw = wt.dim(3);
  if (wt.dim(1) != cin) {
    throw DimensionError("conv2d: weight expects " + std::to_string(wt.dim(1)) + " input channels, got " +
                         std::to_string(cin));
  }
  if (bias && bias.value().size() != cout) throw DimensionError("conv2d: bias length must equal output channels");
  const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
  if (ph < kh || pw < kw) {
    throw DimensionError("conv2d: kernel larger than padded input " + to_string(x.shape()) + ", kernel " +
                         std::to_string(kh) + "x" + std::to_string(kw) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
  }
  const std::size_t oh = (ph - kh) / stride + 1, ow = (pw - kw) / stride + 1;
  const std::size_t k_size = cin * kh * kw, positions = oh * ow;

  // im2col buffers, one per batch item, kept for the backward pass.
  auto cols = std::make_shared<std::vector<RowMat>>(batch, RowMat::Zero(k_size, positions));
  for (std::size_t n = 0; n < batch; ++n) {
    RowMat& col = (*cols)[n];
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          const std::size_t row = (c * kh + i) * kw + j;
          for (std::size_t y = 0; y < oh; ++y) {
            const long sy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t xo = 0; xo < ow; ++xo) {
              const long sx = static_cast<long>(xo * stride + j) - static_cast<long>(pad);
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              col(row, y * ow + xo) = x.at(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
            }
          }
        }
  }

  Tensor out({batch, cout, oh, ow});
  ConstMatMap wmat(wt.data(), cout, k_size);
  for (std::size_t n = 0; n < batch; ++n) {
    MatMap omat(out.data() + n * cout * positions, cout, positions);
    omat.noalias() = wmat * (*cols)[n];
    if (bias) {
      for (std::size_t o = 0; o < cout; ++o) omat.row(o).array() += bias.value()[o];
    }
  }

  return Var::from_op(std::move(out), {input, weight, bias ? bias : Var::constant(Tensor({1}))},
                      [=](ad::Node& self) {
                        auto& in_node = *self.parents[0];
                        auto& w_node = *self.parents[1];
                        auto& b_node = *self.parents[2];
                        const Tensor& g = self.grad;
                        ConstMatMap wm(w_node.value.data(), cout, k_size);
                        for (std::size_t n = 0; n < batch; ++n) {
                          ConstMatMap gm(g.data() + n * cout * positions, cout, positions);
                          if (w_node.requires_grad) {
                            MatMap gw(w_node.grad_buffer().data(), cout, k_size);
                            gw.noalias() += gm * (*cols)[n].transpose();
                          }
                          if (bias && b_node.requires_grad) {
                            Tensor& gb = b_node.grad_buffer();
                            for (std::size_t o = 0; o < cout; ++o) gb[o] += gm.row(o).sum();
                          }
                          if (in_node.requires_grad) {
                            RowMat dcol = wm.transpose() * gm;
                            Tensor& gx = in_node.grad_buffer();
                            for (std::size_t c = 0; c < cin; ++c)
                              for (std::size_t i = 0; i < kh; ++i)
                                for (std::size_t j = 0; j < kw; ++j) {
                                  const std::size_t row = (c * kh + i) * kw + j;
                                  for (std::size_t y = 0; y < oh; ++y) {
                                    const long sy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                                    for (std::size_t xo = 0; xo < ow; ++xo) {
                                      const long sx = static_cast<long>(xo * stride + j) - static_cast<long>(pad);
                                      if (sx < 0 || sx >= static_cast<long>(w)) continue;
                                      gx.at(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) +=
                                          dcol(row, y * ow + xo);
                                    }
                                  }
                                }
                          }
                        }
                      });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank(wv, 2, "linear weight");
  const std::size_t out_dim = wv.dim(0), in_dim = wv.dim(1);
  if (xv.rank() < 1 || xv.shape().back() != in_dim) {
    throw DimensionError("linear: input " + to_string(xv.shape()) + " incompatible with weight " + to_string(wv.shape()));
  }
  if (bias && bias.value().size() != out_dim) throw DimensionError("linear: bias length must equal output width");
  const std::size_t rows = xv.size() / in_dim;
  Shape out_shape = xv.shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  ConstMatMap xm(xv.data(), rows, in_dim);
  ConstMatMap wm(wv.data(), out_dim, in_dim);
  MatMap om(out.data(), rows, out_dim);
  om.noalias() = xm * wm.transpose();
  if (bias) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().data(), out_dim);
    om.rowwise() += bv;
  }
  return Var::from_op(std::move(out), {x, weight, bias ? bias : Var::constant(Tensor({1}))}, [=](ad::Node& self) {
    auto& x_node = *self.parents[0];
    auto& w_node = *self.parents[1];
    auto& b_node = *self.parents[2];
    ConstMatMap gm(self.grad.data(), rows, out_dim);
    if (w_node.requires_grad) {
      ConstMatMap xm2(x_node.value.data(), rows, in_dim);
      MatMap gw(w_node.grad_buffer().data(), out_dim, in_dim);
      gw.noalias() += gm.transpose() * xm2;
    }
    if (bias && b_node.requires_grad) {
      Eigen::Map<Eigen::RowVectorXd> gb(b_node.grad_buffer().data(), out_dim);
      gb += gm.colwise().sum();
    }
    if (x_node.requires_grad) {
      ConstMatMap wm2(w_node.value.data(), out_dim, in_dim);
      MatMap gx(x_node.grad_buffer().data(), rows, in_dim);
      gx.noalias() += gm * wm2;
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  add_into(out, b.value());
  return Var::from_op(std::move(out), {a, b}, [](ad::Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) add_into(p->grad_buffer(), self.grad);
    }
  });
}

Var add_positional(const Var& tokens, const Var& table) {
  const Tensor& t = tokens.value();
  const Tensor& p = table.value();
  require_rank(t, 3, "add_positional tokens");
  require_rank(p, 2, "add_positional table");
  if (t.dim(1) != p.dim(0) || t.dim(2) != p.dim(1)) {
    throw DimensionError("positional table " + to_string(p.shape()) + " does not match tokens " + to_string(t.shape()));
  }
  const std::size_t per = p.size();
  Tensor out = t;
  for (std::size_t n = 0; n < t.dim(0); ++n)
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] += p[i];
  return Var::from_op(std::move(out), {tokens, table}, [per](ad::Node& self) {
    auto& tn = *self.parents[0];
    auto& pn = *self.parents[1];
    if (tn.requires_grad) add_into(tn.grad_buffer(), self.grad);
    if (pn.requires_grad) {
      Tensor& gp = pn.grad_buffer();
      const std::size_t batch = self.grad.size() / per;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < per; ++i) gp[i] += self.grad[n * per + i];
    }
  });
}

Var gelu(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x.value()[i]);
  return Var::from_op(std::move(out), {x}, [](ad::Node& self) {
    auto& xn = *self.parents[0];
    Tensor& gx = xn.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * gelu_derivative(xn.value[i]);
  });
}

namespace {

// Shared standardize-then-affine kernel. Each of `groups` contiguous blocks of
// `group_size` elements is standardized; the affine parameter index for
// element e inside a block is (e / affine_stride) % affine_len.
Var normalize_affine(const Var& x, const Var& gamma, const Var& beta, double eps, std::size_t groups,
                     std::size_t group_size, std::size_t affine_stride, std::size_t affine_len) {
  const Tensor& xv = x.value();
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(groups);
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t g = 0; g < groups; ++g) {
    const double* src = xv.data() + g * group_size;
    double mean = 0.0;
    for (std::size_t e = 0; e < group_size; ++e) mean += src[e];
    mean /= static_cast<double>(group_size);
    double var = 0.0;
    for (std::size_t e = 0; e < group_size; ++e) var += (src[e] - mean) * (src[e] - mean);
    var /= static_cast<double>(group_size);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[g] = is;
    for (std::size_t e = 0; e < group_size; ++e) {
      const std::size_t a = (e / affine_stride) % affine_len;
      const double xh = (src[e] - mean) * is;
      (*xhat)[g * group_size + e] = xh;
      out[g * group_size + e] = gv[a] * xh + bv[a];
    }
  }
  return Var::from_op(std::move(out), {x, gamma, beta}, [=](ad::Node& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    const Tensor& gy = self.grad;
    const Tensor& gam = gn.value;
    std::vector<double> dxhat(group_size);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = g * group_size;
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t e = 0; e < group_size; ++e) {
        const std::size_t a = (e / affine_stride) % affine_len;
        dxhat[e] = gy[base + e] * gam[a];
        sum_d += dxhat[e];
        sum_dx += dxhat[e] * (*xhat)[base + e];
        if (gn.requires_grad) gn.grad_buffer()[a] += gy[base + e] * (*xhat)[base + e];
        if (bn.requires_grad) bn.grad_buffer()[a] += gy[base + e];
      }
      if (xn.requires_grad) {
        Tensor& gx = xn.grad_buffer();
        const double inv_n = 1.0 / static_cast<double>(group_size);
        const double is = (*inv_std)[g];
        for (std::size_t e = 0; e < group_size; ++e) {
          gx[base + e] += is * (dxhat[e] - sum_d * inv_n - (*xhat)[base + e] * sum_dx * inv_n);
        }
      }
    }
  });
}

}  // namespace

Var group_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "group_norm");
  const std::size_t c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("group_norm: affine parameters must have one entry per channel");
  }
  return normalize_affine(x, gamma, beta, eps, xv.dim(0), c * hw, hw, c);
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1) throw DimensionError("layer_norm needs at least one axis");
  const std::size_t d = xv.shape().back();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm: gamma/beta must have length " + std::to_string(d));
  }
  return normalize_affine(x, gamma, beta, eps, xv.size() / d, d, 1, d);
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads, std::vector<Tensor>* weights) {
  const Tensor& qv = q.value();
  require_rank(qv, 3, "attention");
  require_same_shape(qv, k.value(), "attention");
  require_same_shape(qv, v.value(), "attention");
  const std::size_t batch = qv.dim(0), n = qv.dim(1), d = qv.dim(2);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("attention: embedding dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  auto head_view = [&](const Tensor& t, std::size_t b, std::size_t h) {
    return Strided(t.data() + b * n * d + h * hd, n, hd, Eigen::OuterStride<>(d));
  };

  auto probs = std::make_shared<std::vector<RowMat>>(batch * n_heads);
  Tensor out(qv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      RowMat s = (head_view(qv, b, h) * head_view(k.value(), b, h).transpose()) * scale;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      StridedMut(out.data() + b * n * d + h * hd, n, hd, Eigen::OuterStride<>(d)).noalias() =
          s * head_view(v.value(), b, h);
      if (weights) weights->emplace_back(Shape{n, n}, std::vector<double>(s.data(), s.data() + s.size()));
      (*probs)[b * n_heads + h] = std::move(s);
    }
  }

  return Var::from_op(std::move(out), {q, k, v}, [=](ad::Node& self) {
    auto& qn = *self.parents[0];
    auto& kn = *self.parents[1];
    auto& vn = *self.parents[2];
    auto view = [&](const Tensor& t, std::size_t b, std::size_t h) {
      return Strided(t.data() + b * n * d + h * hd, n, hd, Eigen::OuterStride<>(d));
    };
    auto mut_view = [&](Tensor& t, std::size_t b, std::size_t h) {
      return StridedMut(t.data() + b * n * d + h * hd, n, hd, Eigen::OuterStride<>(d));
    };
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const RowMat& a = (*probs)[b * n_heads + h];
        auto go = view(self.grad, b, h);
        if (vn.requires_grad) mut_view(vn.grad_buffer(), b, h).noalias() += a.transpose() * go;
        if (!qn.requires_grad && !kn.requires_grad) continue;
        RowMat da = go * view(vn.value, b, h).transpose();
        RowMat ds = a.array() * (da.colwise() - (da.array() * a.array()).rowwise().sum().matrix()).array();
        ds *= scale;
        if (qn.requires_grad) mut_view(qn.grad_buffer(), b, h).noalias() += ds * view(kn.value, b, h);
        if (kn.requires_grad) mut_view(kn.grad_buffer(), b, h).noalias() += ds.transpose() * view(qn.value, b, h);
      }
    }
  });
}

Var channel_softmax(const Var& logits) {
  const Tensor& lv = logits.value();
  require_rank(lv, 4, "channel_softmax");
  const std::size_t batch = lv.dim(0), c = lv.dim(1), hw = lv.dim(2) * lv.dim(3);
  Tensor out(lv.shape());
  std::vector<double> buf(c);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) buf[ch] = lv[(n * c + ch) * hw + p];
      auto s = softmax(buf);
      for (std::size_t ch = 0; ch < c; ++ch) out[(n * c + ch) * hw + p] = s[ch];
    }
  return Var::from_op(out, {logits}, [batch, c, hw](ad::Node& self) {
    auto& ln = *self.parents[0];
    Tensor& gl = ln.grad_buffer();
    // Recompute probabilities from the stored output via the parent's value.
    const Tensor& lv2 = ln.value;
    std::vector<double> buf2(c);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) buf2[ch] = lv2[(n * c + ch) * hw + p];
        auto s = softmax(buf2);
        double dot = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) dot += self.grad[(n * c + ch) * hw + p] * s[ch];
        for (std::size_t ch = 0; ch < c; ++ch) {
          gl[(n * c + ch) * hw + p] += s[ch] * (self.grad[(n * c + ch) * hw + p] - dot);
        }
      }
  });
}

Var bilinear_resize(const Var& map, std::size_t target_h, std::size_t target_w) {
  const Tensor& mv = map.value();
  require_rank(mv, 4, "bilinear_resize");
  const std::size_t h = mv.dim(2), w = mv.dim(3);
  Tensor out = bilinear_resize(mv, target_h, target_w);
  return Var::from_op(std::move(out), {map}, [=](ad::Node& self) {
    auto& mn = *self.parents[0];
    Tensor& gm = mn.grad_buffer();
    if (h == target_h && w == target_w) {
      add_into(gm, self.grad);
      return;
    }
    const Taps ty = make_taps(h, target_h);
    const Taps tx = make_taps(w, target_w);
    const std::size_t planes = gm.size() / (h * w);
    for (std::size_t p = 0; p < planes; ++p) {
      double* dst = gm.data() + p * h * w;
      const double* g = self.grad.data() + p * target_h * target_w;
      for (std::size_t i = 0; i < target_h; ++i) {
        const double fy = ty.frac[i];
        for (std::size_t j = 0; j < target_w; ++j) {
          const double fx = tx.frac[j];
          const double gv = g[i * target_w + j];
          dst[ty.lo[i] * w + tx.lo[j]] += gv * (1.0 - fy) * (1.0 - fx);
          dst[ty.lo[i] * w + tx.hi[j]] += gv * (1.0 - fy) * fx;
          dst[ty.hi[i] * w + tx.lo[j]] += gv * fy * (1.0 - fx);
          dst[ty.hi[i] * w + tx.hi[j]] += gv * fy * fx;
        }
      }
    }
  });
}

Var flatten_to_tokens(const Var& map) {
  require_rank(map.value(), 4, "flatten_to_tokens");
  const std::size_t h = map.value().dim(2), w = map.value().dim(3);
  return Var::from_op(flatten_to_tokens(map.value()), {map}, [h, w](ad::Node& self) {
    add_into(self.parents[0]->grad_buffer(), tokens_to_map(self.grad, h, w));
  });
}

Var tokens_to_map(const Var& tokens, std::size_t h, std::size_t w) {
  require_rank(tokens.value(), 3, "tokens_to_map");
  return Var::from_op(tokens_to_map(tokens.value(), h, w), {tokens}, [](ad::Node& self) {
    add_into(self.parents[0]->grad_buffer(), flatten_to_tokens(self.grad));
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    lengths.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit split = split_at(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t chunk = lengths[k] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(parts[k].value().data() + o * chunk, chunk,
                  out.data() + o * split.length * split.inner + offset * split.inner);
    }
    offset += lengths[k];
  }
  return Var::from_op(std::move(out), parts, [split, lengths](ad::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& pn = *self.parents[k];
      const std::size_t chunk = lengths[k] * split.inner;
      if (pn.requires_grad) {
        Tensor& g = pn.grad_buffer();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = self.grad.data() + o * split.length * split.inner + off * split.inner;
          double* dst = g.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      off += lengths[k];
    }
  });
}

Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& shape = x.shape();
  if (axis >= shape.size() || length == 0 || start + length > shape[axis]) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(axis) + " of " + to_string(shape));
  }
  const AxisSplit split = split_at(shape, axis);
  Shape out_shape = shape;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const std::size_t chunk = length * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.value().data() + (o * split.length + start) * split.inner, chunk, out.data() + o * chunk);
  }
  return Var::from_op(std::move(out), {x}, [split, start, chunk](ad::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = g.data() + (o * split.length + start) * split.inner;
      const double* src = self.grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Var mean_of(const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("mean_of zero tensors");
  Tensor out = parts.front().value();
  for (std::size_t k = 1; k < parts.size(); ++k) {
    require_same_shape(out, parts[k].value(), "mean_of");
    add_into(out, parts[k].value());
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (auto& v : out.values()) v *= inv;
  return Var::from_op(std::move(out), parts, [inv](ad::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * self.grad[i];
    }
  });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  require_same_shape(x.value(), weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  return Var::from_op(Tensor({1}, std::vector<double>{s}), {x}, [weights](ad::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * weights[i];
  });
}

}  // namespace hct::nn
