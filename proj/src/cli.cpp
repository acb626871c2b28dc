#include "hct/cli.hpp"

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "hct/checkpoint.hpp"
#include "hct/data.hpp"
#include "hct/errors.hpp"
#include "hct/evaluation.hpp"
#include "hct/gradcheck.hpp"

namespace hct::cli {

nlohmann::json RunConfig::to_json() const {
  return {{"command", command},
          {"seed", seed},
          {"data", data},
          {"out", out},
          {"patients", patients},
          {"slices", slices},
          {"size", size},
          {"checkpoint", checkpoint},
          {"resume", resume},
          {"threshold", threshold},
          {"folds", folds},
          {"variants", variants},
          {"gradcheck_seeds", gradcheck_seeds},
          {"ops", ops},
          {"model", model},
          {"train", train}};
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {"command", "seed",      "data",  "out",      "patients",
                                              "slices",  "size",      "checkpoint", "resume", "threshold",
                                              "folds",   "variants",  "gradcheck_seeds", "ops", "perturb_op",
                                              "model",   "train"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    c.command = j.value("command", c.command);
    c.seed = j.value("seed", c.seed);
    c.data = j.value("data", c.data);
    c.out = j.value("out", c.out);
    c.patients = j.value("patients", c.patients);
    c.slices = j.value("slices", c.slices);
    if (j.contains("size")) {
      c.size = j.at("size").get<std::size_t>();
      c.size_given = true;
    }
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.resume = j.value("resume", c.resume);
    c.threshold = j.value("threshold", c.threshold);
    c.folds = j.value("folds", c.folds);
    c.variants = j.value("variants", c.variants);
    c.gradcheck_seeds = j.value("gradcheck_seeds", c.gradcheck_seeds);
    c.ops = j.value("ops", c.ops);
    c.perturb_op = j.value("perturb_op", c.perturb_op);
    if (j.contains("model")) c.model.update(j.at("model"));
    if (j.contains("train")) c.train.update(j.at("train"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (!c.model.is_object() || !c.train.is_object()) throw ConfigError("'model' and 'train' must be JSON objects");
  return c;
}

model::ModelConfig resolve_model(const RunConfig& run, model::ModelConfig base, bool inherit_seed) {
  nlohmann::json overrides = run.model;
  if (run.size_given) overrides["h"] = overrides["w"] = run.size;
  if (inherit_seed && !overrides.contains("seed")) overrides["seed"] = run.seed;
  auto cfg = model::model_config_from_json(overrides, base);
  cfg.validate();
  return cfg;
}

train::TrainConfig resolve_train(const RunConfig& run) {
  nlohmann::json overrides = run.train;
  if (!overrides.contains("seed")) overrides["seed"] = run.seed;
  auto cfg = train::train_config_from_json(overrides);
  cfg.validate();
  return cfg;
}

namespace {

void require(const std::string& value, const std::string& flag, const std::string& command) {
  if (value.empty()) throw ConfigError(command + " needs " + flag);
}

// Takes the input size from the dataset unless one was requested explicitly.
void match_dataset(model::ModelConfig& cfg, const RunConfig& run, const data::Dataset& ds) {
  const bool explicit_size = run.size_given || run.model.contains("h") || run.model.contains("w");
  if (explicit_size && (cfg.h != ds.meta.h || cfg.w != ds.meta.w)) {
    throw ConfigError("model input " + std::to_string(cfg.h) + "x" + std::to_string(cfg.w) +
                      " does not match dataset slices " + std::to_string(ds.meta.h) + "x" +
                      std::to_string(ds.meta.w));
  }
  cfg.h = ds.meta.h;
  cfg.w = ds.meta.w;
  cfg.validate();
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

int cmd_synth(const RunConfig& run, std::ostream& out) {
  require(run.out, "--out", "synth");
  const auto ds = data::generate_phantom(run.seed, run.patients, run.slices, run.size, run.size);
  data::write_dataset(ds, run.out);
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016" PRIx64, data::payload_checksum(run.out));
  out << "samples: " << ds.samples.size() << "\nchecksum: " << sum << '\n';
  return kOk;
}

int cmd_train(const RunConfig& run, std::ostream& out) {
  require(run.data, "--data", "train");
  require(run.out, "--out", "train");
  auto mcfg = resolve_model(run);
  const auto tcfg = resolve_train(run);
  const auto ds = data::read_dataset(run.data);
  match_dataset(mcfg, run, ds);

  train::TrainOptions options;
  options.out_dir = run.out;
  if (!run.resume.empty()) options.resume = model::read_checkpoint(run.resume);
  auto model = model::Model::build(mcfg);
  std::filesystem::create_directories(run.out);
  write_json(std::filesystem::path(run.out) / "run_config.json",
             {{"run", run.to_json()}, {"model", model::to_json(mcfg)}, {"train", train::to_json(tcfg)}});
  const auto result = train::train(model, ds.samples, tcfg, options);
  if (!result.log.empty()) {
    out << "epochs: " << result.log.size() << "\nfirst loss: " << result.log.front().mean_loss
        << "\nfinal loss: " << result.log.back().mean_loss << '\n';
  }
  out << "checkpoint: " << (std::filesystem::path(run.out) / "checkpoint.ckpt").string() << '\n';
  return kOk;
}

int cmd_eval(const RunConfig& run, std::ostream& out) {
  require(run.data, "--data", "eval");
  require(run.checkpoint, "--checkpoint", "eval");
  require(run.out, "--out", "eval");
  const auto ckpt = model::read_checkpoint(run.checkpoint);
  const auto mcfg = resolve_model(run, model::model_config_from_json(ckpt.config), false);
  const auto ds = data::read_dataset(run.data);
  if (mcfg.h != ds.meta.h || mcfg.w != ds.meta.w) {
    throw ConfigError("checkpoint model expects " + std::to_string(mcfg.h) + "x" + std::to_string(mcfg.w) +
                      " slices, dataset has " + std::to_string(ds.meta.h) + "x" + std::to_string(ds.meta.w));
  }
  auto model = model::Model::build(mcfg);
  model::load_parameters(model, ckpt);

  const auto r = eval::evaluate(eval::model_predictor(model), ds.samples, run.threshold);
  eval::MetricsReport report{model::to_string(mcfg.variant), {{0, r.mean}}, r.mean, r.pr, model.parameter_count()};
  const std::filesystem::path dir = run.out;
  std::filesystem::create_directories(dir);
  eval::write_metrics_csv(dir / "metrics.csv", {report});
  eval::write_pr_csv(dir / ("pr_" + report.variant + ".csv"), report.pr);
  write_json(dir / "summary.json",
             {{"config", {{"run", run.to_json()}, {"model", model::to_json(mcfg)}}},
              {"aggregation", "scalar metrics are macro-averaged over slices; the PR curve pools pixel counts"},
              {"samples", ds.samples.size()},
              {"metrics",
               {{"dsc", 100 * r.mean.dsc},
                {"precision", 100 * r.mean.precision},
                {"sensitivity", 100 * r.mean.sensitivity},
                {"specificity", 100 * r.mean.specificity}}}});
  out << "samples: " << ds.samples.size() << "\nDSC: " << 100 * r.mean.dsc << '\n';
  return kOk;
}

int cmd_ablate(const RunConfig& run, std::ostream& out) {
  require(run.data, "--data", "ablate");
  require(run.out, "--out", "ablate");
  std::vector<model::Variant> variants;
  for (const auto& v : run.variants) variants.push_back(model::parse_variant(v));
  auto mcfg = resolve_model(run);
  const auto tcfg = resolve_train(run);
  const auto ds = data::read_dataset(run.data);
  match_dataset(mcfg, run, ds);

  eval::AblationOptions options;
  options.k = run.folds;
  options.split_seed = run.seed;
  options.threshold = run.threshold;
  options.out_dir = run.out;
  options.config_echo = {{"run", run.to_json()}, {"model", model::to_json(mcfg)}, {"train", train::to_json(tcfg)}};
  const auto result = eval::ablation_run(ds, variants, mcfg, tcfg, options);
  char line[160];
  out << "variant      DSC     Pre     Sen     Spe\n";
  for (const auto& r : result.reports) {
    std::snprintf(line, sizeof line, "%-8s %7.2f %7.2f %7.2f %7.2f\n", r.variant.c_str(), 100 * r.mean.dsc,
                  100 * r.mean.precision, 100 * r.mean.sensitivity, 100 * r.mean.specificity);
    out << line;
  }
  out << "fusion ordering: " << result.summary["fusion_ordering"].dump() << '\n';
  return kOk;
}

int cmd_gradcheck(const RunConfig& run, std::ostream& out, std::ostream& err) {
  gradcheck::Options options;
  options.seeds = run.gradcheck_seeds;
  options.base_seed = run.seed;
  options.ops = run.ops;
  options.perturb_op = run.perturb_op;
  const auto report = gradcheck::run(options);
  char line[200];
  for (const auto& r : report.ops) {
    std::snprintf(line, sizeof line, "%-20s max_rel_error %.3e  seeds %zu  probes %zu  %s\n", r.op.c_str(),
                  r.max_rel_error, r.seeds, r.probes, r.passed ? "PASS" : "FAIL");
    out << line;
  }
  for (const auto& r : report.ops) {
    if (!r.passed) {
      err << "gradient check failed: op " << r.op << ", seed " << r.worst_seed << ", tensor " << r.worst_tensor
          << ", relative error " << r.max_rel_error << '\n';
    }
  }
  return report.passed() ? kOk : kVerificationFailed;
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data, out, checkpoint, resume, variant, perturb_op;
  std::optional<std::size_t> size, patients, slices, d_embed, depth, heads, epochs, batch_size, checkpoint_every,
      folds, seeds;
  std::optional<double> lr, threshold;
  std::vector<std::string> variants, ops;
  bool no_augment = false, no_timing = false;

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    auto put = [&j](const char* key, const auto& v) {
      if (v) j[key] = *v;
    };
    put("seed", seed);
    put("data", data);
    put("out", out);
    put("checkpoint", checkpoint);
    put("resume", resume);
    put("perturb_op", perturb_op);
    put("size", size);
    put("patients", patients);
    put("slices", slices);
    put("folds", folds);
    put("gradcheck_seeds", seeds);
    put("threshold", threshold);
    if (!variants.empty()) j["variants"] = variants;
    if (!ops.empty()) j["ops"] = ops;
    nlohmann::json m = nlohmann::json::object(), t = nlohmann::json::object();
    if (variant) m["variant"] = *variant;
    if (d_embed) m["d_embed"] = *d_embed;
    if (depth) m["depth"] = *depth;
    if (heads) m["n_heads"] = *heads;
    if (epochs) t["epochs"] = *epochs;
    if (batch_size) t["batch_size"] = *batch_size;
    if (checkpoint_every) t["checkpoint_every"] = *checkpoint_every;
    if (lr) t["lr0"] = *lr;
    if (no_augment) t["augment"] = false;
    if (no_timing) t["log_timing"] = false;
    if (!m.empty()) j["model"] = m;
    if (!t.empty()) j["train"] = t;
    return j;
  }
};

void add_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON config file; flags override its values");
  app->add_option("--seed", f.seed, "Seed for every component without its own seed");
  app->add_option("--data", f.data, "Dataset directory");
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--size", f.size, "Slice side length (multiple of 16)");
  app->add_option("--patients", f.patients, "Number of synthetic patients");
  app->add_option("--slices", f.slices, "Slices per patient");
  app->add_option("--variant", f.variant, "Model variant");
  app->add_option("--d-embed", f.d_embed, "Token dimension D");
  app->add_option("--depth", f.depth, "Transformer modules per stack");
  app->add_option("--heads", f.heads, "Attention heads");
  app->add_option("--epochs", f.epochs, "Training epochs");
  app->add_option("--batch-size", f.batch_size, "Batch size");
  app->add_option("--lr", f.lr, "Initial learning rate");
  app->add_option("--checkpoint-every", f.checkpoint_every, "Write a checkpoint every N epochs");
  app->add_flag("--no-augment", f.no_augment, "Disable flips and crops during training");
  app->add_flag("--no-timing", f.no_timing, "Write 0 in the log's seconds column");
  app->add_option("--checkpoint", f.checkpoint, "Checkpoint to evaluate");
  app->add_option("--resume", f.resume, "Checkpoint to resume training from");
  app->add_option("--threshold", f.threshold, "Binarization threshold");
  app->add_option("--folds", f.folds, "Cross-validation folds");
  app->add_option("--variants", f.variants, "Variants to compare")->delimiter(',');
  app->add_option("--seeds", f.seeds, "Gradient-check seeds per op");
  app->add_option("--ops", f.ops, "Gradient-check ops")->delimiter(',');
  app->add_option("--perturb-op", f.perturb_op, "Corrupt one op's analytic gradient")->group("");
}

RunConfig load(const std::string& command, const Flags& flags) {
  RunConfig base;
  if (!flags.config.empty()) {
    std::ifstream in(flags.config);
    if (!in) throw ConfigError("cannot read config file '" + flags.config + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + flags.config + "' is not valid JSON: " + e.what());
    }
    base = run_config_from_json(j);
  }
  RunConfig run = run_config_from_json(flags.to_json(), base);
  run.command = command;
  // Validate the model and training parts before any work starts.
  if (command != "synth" && command != "gradcheck") {
    model::model_config_from_json(run.model);
    resolve_train(run);
  }
  if (command == "synth" && (run.size == 0 || run.size % 16 != 0)) {
    throw ConfigError("--size must be a positive multiple of 16, got " + std::to_string(run.size));
  }
  return run;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hyper-connected transformer for PET-CT segmentation"};
  app.name("hct");
  app.require_subcommand(1, 1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "Generate a synthetic PET-CT phantom dataset"},
      {"train", "Train a model on a dataset"},
      {"eval", "Evaluate a checkpoint on a dataset"},
      {"ablate", "k-fold comparison of fusion variants"},
      {"gradcheck", "Finite-difference gradient suite"}};
  for (const auto& [name, help] : commands) add_flags(app.add_subcommand(name, help), flags);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsageError;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig run = load(command, flags);
    if (command == "synth") return cmd_synth(run, out);
    if (command == "train") return cmd_train(run, out);
    if (command == "eval") return cmd_eval(run, out);
    if (command == "ablate") return cmd_ablate(run, out);
    return cmd_gradcheck(run, out, err);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace hct::cli
