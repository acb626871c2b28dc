#include "hct/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "hct/errors.hpp"

namespace hct::train {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(poly_power >= 0.0)) throw ConfigError("poly_power must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"poly_power", c.poly_power},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"decoupled_weight_decay", c.decoupled_weight_decay},
          {"augment", c.augment},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"log_timing", c.log_timing}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.lr0 = j.value("lr0", c.lr0);
    c.poly_power = j.value("poly_power", c.poly_power);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.decoupled_weight_decay = j.value("decoupled_weight_decay", c.decoupled_weight_decay);
    c.augment = j.value("augment", c.augment);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_timing = j.value("log_timing", c.log_timing);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  return c;
}

// ---- loss ----------------------------------------------------------------------

namespace {

constexpr double kProbFloor = 1e-12;

void check_loss_shapes(const Tensor& probs, const Tensor& mask) {
  if (probs.rank() != 4 || probs.dim(1) != 2) {
    throw DimensionError("cross_entropy expects (B, 2, H, W) probabilities, got " + to_string(probs.shape()));
  }
  const Shape batched{probs.dim(0), probs.dim(2), probs.dim(3)};
  const bool ok = mask.shape() == batched || (probs.dim(0) == 1 && mask.shape() == Shape{probs.dim(2), probs.dim(3)});
  if (!ok) {
    throw DimensionError("cross_entropy mask shape " + to_string(mask.shape()) + " does not match probabilities " +
                         to_string(probs.shape()));
  }
}

}  // namespace

double cross_entropy(const Tensor& probs, const Tensor& mask) {
  check_loss_shapes(probs, mask);
  const std::size_t batch = probs.dim(0), hw = probs.dim(2) * probs.dim(3);
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t cls = mask[n * hw + p] != 0.0 ? 1 : 0;
      total -= std::log(std::max(probs[(n * 2 + cls) * hw + p], kProbFloor));
    }
  return total / static_cast<double>(batch * hw);
}

ad::Var cross_entropy(const ad::Var& probs, const Tensor& mask) {
  const double loss = cross_entropy(probs.value(), mask);
  return ad::Var::from_op(Tensor({1}, std::vector<double>{loss}), {probs}, [mask](ad::Node& self) {
    auto& pn = *self.parents[0];
    Tensor& g = pn.grad_buffer();
    const std::size_t batch = pn.value.dim(0), hw = pn.value.dim(2) * pn.value.dim(3);
    const double scale = self.grad[0] / static_cast<double>(batch * hw);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t cls = mask[n * hw + p] != 0.0 ? 1 : 0;
        const std::size_t idx = (n * 2 + cls) * hw + p;
        const double prob = pn.value[idx];
        if (prob > kProbFloor) g[idx] -= scale / prob;  // the floor is flat below 1e-12
      }
  });
}

// ---- schedule and optimizer ------------------------------------------------------

double poly_lr(std::size_t step, std::size_t total_steps, double lr0, double power) {
  if (total_steps == 0) throw ArgumentError("poly_lr needs total_steps >= 1");
  if (step > total_steps) {
    throw ArgumentError("poly_lr step " + std::to_string(step) + " exceeds total_steps " + std::to_string(total_steps));
  }
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * std::pow(frac, power);
}

void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, OptimState& state, double lr,
               const TrainConfig& config) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter and gradient counts differ");
  if (state.m.empty() && state.v.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape() || state.m[i].shape() != params[i]->shape() ||
        state.v[i].shape() != params[i]->shape()) {
      throw DimensionError("adam_step: shape mismatch at parameter " + std::to_string(i));
    }
  }

  state.step += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  const double wd = config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = config.decoupled_weight_decay ? g[k] : g[k] + wd * p[k];
      m[k] = b1 * m[k] + (1.0 - b1) * gk;
      v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
      const double update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.adam_eps);
      const double decay = config.decoupled_weight_decay ? lr * wd * p[k] : 0.0;
      p[k] -= update + decay;
    }
  }
}

void adam_step(nn::ParamStore& store, OptimState& state, double lr, const TrainConfig& config) {
  std::vector<Tensor*> params;
  std::vector<Tensor> grads;
  for (auto& [name, var] : store.entries()) {
    ad::Var handle = var;
    params.push_back(&handle.mutable_value());
    grads.push_back(var.grad());
  }
  adam_step(params, grads, state, lr, config);
}

// ---- loop --------------------------------------------------------------------------

Batch make_batch(const std::vector<const data::Sample*>& samples) {
  if (samples.empty()) throw ArgumentError("empty batch");
  const std::size_t h = samples.front()->pet.dim(0), w = samples.front()->pet.dim(1);
  const std::size_t b = samples.size();
  Batch batch{Tensor({b, 1, h, w}), Tensor({b, 1, h, w}), Tensor({b, h, w})};
  for (std::size_t n = 0; n < b; ++n) {
    const data::Sample& s = *samples[n];
    if (s.pet.shape() != Shape{h, w}) throw DimensionError("batch samples must share one shape");
    std::copy_n(s.pet.data(), h * w, batch.pet.data() + n * h * w);
    std::copy_n(s.ct.data(), h * w, batch.ct.data() + n * h * w);
    std::copy_n(s.mask.data(), h * w, batch.mask.data() + n * h * w);
  }
  return batch;
}

model::CheckpointData training_checkpoint(const model::Model& model, const OptimState& state, std::size_t epoch,
                                          const TrainConfig& config) {
  std::vector<model::NamedTensor> moments;
  const auto& entries = model.params().entries();
  for (std::size_t i = 0; i < state.m.size() && i < entries.size(); ++i) {
    moments.push_back({"adam.m/" + entries[i].first, state.m[i]});
    moments.push_back({"adam.v/" + entries[i].first, state.v[i]});
  }
  nlohmann::json extra = {{"epoch", epoch}, {"step", state.step}, {"train_config", to_json(config)}};
  return model::snapshot(model, std::move(moments), std::move(extra));
}

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write training log '" + path.string() + "'");
  out << "epoch,mean_loss,lr,seconds\n";
  char line[160];
  for (const auto& e : log) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.3f\n", e.epoch, e.mean_loss, e.lr, e.seconds);
    out << line;
  }
}

namespace {

void round_state(OptimState& state) {
  for (auto* group : {&state.m, &state.v})
    for (auto& t : *group)
      for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

OptimState restore_state(const model::Model& model, const model::CheckpointData& ckpt) {
  OptimState state;
  state.step = ckpt.extra.value("step", std::size_t{0});
  if (state.step == 0) return state;
  for (const auto& [name, var] : model.params().entries()) {
    const Tensor* m = model::find_tensor(ckpt, "adam.m/" + name);
    const Tensor* v = model::find_tensor(ckpt, "adam.v/" + name);
    if (!m || !v || m->shape() != var.shape() || v->shape() != var.shape()) {
      throw FormatError("checkpoint lacks optimizer moments for '" + name + "'");
    }
    state.m.push_back(*m);
    state.v.push_back(*v);
  }
  return state;
}

}  // namespace

TrainResult train(model::Model& model, const std::vector<data::Sample>& samples, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (samples.empty()) throw ArgumentError("training needs at least one sample");

  std::vector<data::Sample> prepared;
  prepared.reserve(samples.size());
  for (const auto& s : samples) {
    data::validate(s);
    prepared.push_back(data::preprocess(s));
  }

  const std::size_t batches_per_epoch = (prepared.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * batches_per_epoch;

  TrainResult result;
  std::size_t start_epoch = 0;
  if (options.resume) {
    model::load_parameters(model, *options.resume);
    result.state = restore_state(model, *options.resume);
    start_epoch = options.resume->extra.value("epoch", std::size_t{0});
    if (result.state.step != start_epoch * batches_per_epoch) {
      throw FormatError("checkpoint step counter does not match its epoch for this dataset and batch size");
    }
  }
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  const auto seed_lo = static_cast<std::uint32_t>(config.seed), seed_hi = static_cast<std::uint32_t>(config.seed >> 32);
  std::vector<std::size_t> order(prepared.size());
  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    // Per-epoch stream so a resumed run replays the same shuffles and augmentations.
    std::seed_seq seq{seed_lo, seed_hi, static_cast<std::uint32_t>(epoch), 0x7261u};
    std::mt19937_64 rng(seq);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      std::vector<data::Sample> augmented;
      std::vector<const data::Sample*> members;
      const std::size_t begin = b * config.batch_size, end = std::min(prepared.size(), begin + config.batch_size);
      augmented.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        const data::Sample& s = prepared[order[i]];
        if (config.augment) {
          augmented.push_back(data::augment(s, rng));
          members.push_back(&augmented.back());
        } else {
          members.push_back(&s);
        }
      }
      const Batch batch = make_batch(members);

      model.params().zero_grad();
      ad::Var loss = cross_entropy(model.forward(batch.pet, batch.ct), batch.mask);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(result.state.step + 1) + " (batch " + std::to_string(b + 1) + ")");
      }
      ad::backward(loss);
      lr = poly_lr(result.state.step, total_steps, config.lr0, config.poly_power);
      adam_step(model.params(), result.state, lr, config);
      model::round_to_float32(model.params());
      round_state(result.state);
      loss_sum += value * static_cast<double>(end - begin);
    }

    const double seconds =
        config.log_timing
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()
            : 0.0;
    result.log.push_back({epoch + 1, loss_sum / static_cast<double>(prepared.size()), lr, seconds});

    if (!options.out_dir.empty()) {
      write_log_csv(options.out_dir / "train_log.csv", result.log);
      if (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
        model::write_checkpoint(options.out_dir / ("checkpoint_epoch_" + std::to_string(epoch + 1) + ".ckpt"),
                                training_checkpoint(model, result.state, epoch + 1, config));
      }
    }
  }
  if (!options.out_dir.empty()) {
    model::write_checkpoint(options.out_dir / "checkpoint.ckpt",
                            training_checkpoint(model, result.state, config.epochs, config));
  }
  return result;
}

}  // namespace hct::train
