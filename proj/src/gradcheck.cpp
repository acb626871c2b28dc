#include "hct/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>

#include "hct/errors.hpp"
#include "hct/layers.hpp"
#include "hct/model.hpp"

namespace hct::gradcheck {

namespace {

using ad::Var;

struct Problem {
  nn::ParamStore store;  // inputs are registered here too, so they get checked
  std::function<Var()> forward;
  std::shared_ptr<model::Model> model;  // keeps the end-to-end network alive
  double fraction = 1.0;
};

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// Moves every parameter off its initial value so zero biases, unit gains and
// zero-initialized tables do not hide errors.
void jitter(const nn::ParamStore& store, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& [name, p] : store.entries()) {
    Var handle = p;
    for (auto& v : handle.mutable_value().values()) v += n(rng);
  }
}

Problem make_problem(const std::string& op, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + std::hash<std::string>{}(op));
  Problem p;
  auto& s = p.store;
  const bool odd = seed % 2 == 1;

  if (op == "conv2d") {
    const std::size_t stride = odd ? 2 : 1;
    Var x = s.add("input", random_tensor({2, 3, 7, 6}, rng));
    auto conv = nn::Conv2d::create(s, "conv", 3, 4, 3, stride, 1, rng);
    p.forward = [x, conv] { return conv(x); };
  } else if (op == "residual_block") {
    const std::size_t out_ch = odd ? 4 : 3, stride = odd ? 2 : 1;
    Var x = s.add("input", random_tensor({2, 3, 6, 6}, rng));
    auto block = nn::ResidualBlock::create(s, "block", 3, out_ch, stride, rng);
    p.forward = [x, block] { return block(x); };
  } else if (op == "layer_norm") {
    Var x = s.add("input", random_tensor({2, 5, 8}, rng));
    auto norm = nn::LayerNorm::create(s, "norm", 8);
    p.forward = [x, norm] { return norm(x); };
  } else if (op == "msa") {
    Var x = s.add("input", random_tensor({2, 6, 8}, rng));
    auto attn = nn::MultiHeadAttention::create(s, "attn", 8, odd ? 4 : 2, rng);
    p.forward = [x, attn] { return attn(x); };
  } else if (op == "mlp_block") {
    Var x = s.add("input", random_tensor({2, 5, 8}, rng));
    auto mlp = nn::Mlp::create(s, "mlp", 8, rng);
    p.forward = [x, mlp] { return mlp(x); };
  } else if (op == "transformer_module") {
    Var x = s.add("input", random_tensor({2, 6, 8}, rng));
    auto block = nn::TransformerModule::create(s, "block", 8, 2, rng);
    p.forward = [x, block] { return block(x); };
  } else if (op == "segmentation_head") {
    model::ModelConfig cfg;
    cfg.h = cfg.w = 32;
    cfg.d_embed = 8;
    Var features = s.add("features", random_tensor({2, 8, 2, 2}, rng));
    Var skip = s.add("skip", random_tensor({2, 3, 8, 8}, rng));
    auto head = model::SegmentationHead::create(s, "head", cfg, 3, rng);
    p.forward = [features, skip, head] { return head(features, skip, 32, 32); };
  } else if (op == "hct_tiny") {
    model::ModelConfig cfg;
    cfg.h = cfg.w = 32;
    cfg.d_embed = 16;
    cfg.depth = 1;
    cfg.n_heads = 2;
    cfg.backbone_widths = {2, 2, 4, 4};
    cfg.seed = seed;
    p.model = std::make_shared<model::Model>(model::Model::build(cfg));
    const Tensor pet = random_tensor({1, 1, 32, 32}, rng), ct = random_tensor({1, 1, 32, 32}, rng);
    p.forward = [m = p.model, pet, ct] { return m->forward(pet, ct); };
    p.fraction = -1;  // set from options by the caller
    jitter(p.model->params(), rng, 0.05);
    return p;
  } else {
    std::string valid;
    for (const auto& n : op_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ArgumentError("unknown gradient-check op '" + op + "'; valid ops: " + valid);
  }
  jitter(s, rng, 0.1);
  return p;
}

nn::ParamStore& params_of(Problem& p) { return p.model ? p.model->params() : p.store; }

}  // namespace

bool Report::passed() const {
  return !ops.empty() && std::all_of(ops.begin(), ops.end(), [](const OpResult& r) { return r.passed; });
}

std::vector<std::string> op_names() {
  return {"conv2d", "residual_block", "layer_norm", "msa", "mlp_block", "transformer_module",
          "segmentation_head", "hct_tiny"};
}

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                      double denominator_floor) {
  if (analytic.size() != numeric.size()) throw ArgumentError("relative_error: length mismatch");
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), denominator_floor});
}

Report run(const Options& options) {
  if (options.seeds < 1) throw ArgumentError("gradient check needs at least one seed");
  const auto ops = options.ops.empty() ? op_names() : options.ops;
  Report report;
  for (const auto& op : ops) {
    OpResult result;
    result.op = op;
    for (std::size_t k = 0; k < options.seeds; ++k) {
      const std::uint64_t seed = options.base_seed + k;
      Problem problem = make_problem(op, seed);
      nn::ParamStore& params = params_of(problem);
      const double fraction = problem.fraction < 0 ? options.model_fraction : problem.fraction;

      std::mt19937_64 rng(seed ^ 0x5eedULL);
      const Var out = problem.forward();
      const Tensor weights = random_tensor(out.shape(), rng);
      auto loss = [&] { return nn::weighted_sum(problem.forward(), weights).value()[0]; };

      params.zero_grad();
      ad::backward(nn::weighted_sum(out, weights));

      for (const auto& [name, p] : params.entries()) {
        Var handle = p;
        Tensor grad = handle.grad();
        if (op == options.perturb_op) {
          for (auto& g : grad.values()) g *= 1.001;
        }
        std::vector<std::size_t> idx(grad.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (fraction < 1.0) {
          const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * idx.size())));
          std::shuffle(idx.begin(), idx.end(), rng);
          idx.resize(n);
        }
        std::vector<double> analytic, numeric;
        for (auto i : idx) {
          double& v = handle.mutable_value()[i];
          const double saved = v;
          v = saved + options.step;
          const double up = loss();
          v = saved - options.step;
          const double down = loss();
          v = saved;
          analytic.push_back(grad[i]);
          numeric.push_back((up - down) / (2 * options.step));
        }
        result.probes += idx.size();
        const double err = relative_error(analytic, numeric, options.floor / options.tolerance);
        if (result.worst_tensor.empty() || err > result.max_rel_error) {
          result.max_rel_error = err;
          result.worst_tensor = name;
          result.worst_seed = seed;
        }
      }
      ++result.seeds;
    }
    result.passed = result.max_rel_error < options.tolerance;
    report.ops.push_back(result);
  }
  return report;
}

}  // namespace hct::gradcheck
