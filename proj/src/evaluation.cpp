#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

#include "hct/errors.hpp"
#include "hct/evaluation.hpp"

namespace hct::eval {

Predictor model_predictor(const model::Model& model) {
  return [&model](const data::Sample& raw) {
    const data::Sample s = data::preprocess(raw);
    const train::Batch batch = train::make_batch({&s});
    const Tensor probs = model.forward(batch.pet, batch.ct).value();
    const std::size_t h = s.pet.dim(0), w = s.pet.dim(1);
    Tensor fg({h, w});
    std::copy_n(probs.data() + h * w, h * w, fg.data());  // channel 1 of batch item 0
    return fg;
  };
}

EvalResult evaluate(const Predictor& predictor, const std::vector<data::Sample>& samples, double threshold,
                    const std::vector<double>& thresholds) {
  if (samples.empty()) throw ArgumentError("evaluate needs at least one test sample");
  EvalResult r;
  r.thresholds = thresholds;
  r.pooled_counts.assign(thresholds.size(), ConfusionCounts{});
  for (const auto& s : samples) {
    const Tensor prob = predictor(s);
    const auto counts = threshold_counts(prob, s.mask, thresholds);
    for (std::size_t i = 0; i < counts.size(); ++i) r.pooled_counts[i] += counts[i];
    r.per_sample.push_back(metrics_of(confusion(binarize(prob, threshold), s.mask)));
  }
  for (const auto& m : r.per_sample) {
    r.mean.dsc += m.dsc;
    r.mean.precision += m.precision;
    r.mean.sensitivity += m.sensitivity;
    r.mean.specificity += m.specificity;
  }
  const double n = static_cast<double>(r.per_sample.size());
  r.mean = {r.mean.dsc / n, r.mean.precision / n, r.mean.sensitivity / n, r.mean.specificity / n};
  r.pr = pr_from_counts(thresholds, r.pooled_counts);
  return r;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << "variant,fold,dsc,precision,sensitivity,specificity\n";
  char line[256];
  for (const auto& r : reports) {
    for (const auto& f : r.folds) {
      std::snprintf(line, sizeof line, "%s,%zu,%.6f,%.6f,%.6f,%.6f\n", r.variant.c_str(), f.fold,
                    100.0 * f.metrics.dsc, 100.0 * f.metrics.precision, 100.0 * f.metrics.sensitivity,
                    100.0 * f.metrics.specificity);
      out << line;
    }
  }
}

void write_pr_csv(const std::filesystem::path& path, const std::vector<PrPoint>& pr) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << "threshold,precision,recall\n";
  char line[128];
  for (const auto& p : pr) {
    std::snprintf(line, sizeof line, "%.2f,%.9f,%.9f\n", p.threshold, p.precision, p.recall);
    out << line;
  }
}

nlohmann::json fusion_ordering(const std::vector<MetricsReport>& reports) {
  std::map<std::string, double> dsc_by_variant;
  for (const auto& r : reports) dsc_by_variant[r.variant] = 100.0 * r.mean.dsc;

  auto family = [&](const std::string& hf, const std::string& ef, const std::string& lf) -> nlohmann::json {
    if (!dsc_by_variant.count(hf) || !dsc_by_variant.count(ef) || !dsc_by_variant.count(lf)) {
      return "not evaluated";
    }
    const double h = dsc_by_variant[hf], e = dsc_by_variant[ef], l = dsc_by_variant[lf];
    return {{"observed", h > e && e > l}, {"dsc", {{hf, h}, {ef, e}, {lf, l}}}};
  };
  return {{"expected", "HF > EF > LF (mean DSC)"},
          {"gating", false},
          {"transformer", family("HCT", "EF-TN", "LF-TN")},
          {"convolutional", family("HF-FCN", "EF-FCN", "LF-FCN")}};
}

namespace {

nlohmann::json metrics_json(const ScalarMetrics& m) {
  return {{"dsc", 100.0 * m.dsc},
          {"precision", 100.0 * m.precision},
          {"sensitivity", 100.0 * m.sensitivity},
          {"specificity", 100.0 * m.specificity}};
}

std::vector<data::Sample> select(const data::Dataset& ds, const std::vector<int>& ids) {
  std::vector<data::Sample> out;
  for (const auto& s : ds.samples) {
    if (std::binary_search(ids.begin(), ids.end(), s.patient_id)) out.push_back(s);
  }
  return out;
}

}  // namespace

AblationResult ablation_run(const data::Dataset& dataset, const std::vector<model::Variant>& variants,
                            const model::ModelConfig& base, const train::TrainConfig& train_config,
                            const AblationOptions& options) {
  if (variants.empty()) throw ArgumentError("ablation needs at least one variant");
  const auto folds = kfold_split(dataset.patient_ids(), options.k, options.split_seed);
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  AblationResult result;
  nlohmann::json variant_json = nlohmann::json::object();
  for (const auto variant : variants) {
    model::ModelConfig cfg = base;
    cfg.variant = variant;
    MetricsReport report;
    report.variant = model::to_string(variant);
    std::vector<double> thresholds = default_thresholds();
    std::vector<ConfusionCounts> pooled(thresholds.size());
    for (std::size_t f = 0; f < folds.size(); ++f) {
      model::Model m = model::Model::build(cfg);
      report.parameter_count = m.parameter_count();
      train::train(m, select(dataset, folds[f].train_ids), train_config);
      const EvalResult r = evaluate(model_predictor(m), select(dataset, folds[f].test_ids), options.threshold,
                                    thresholds);
      for (std::size_t i = 0; i < pooled.size(); ++i) pooled[i] += r.pooled_counts[i];
      report.folds.push_back({f, r.mean});
    }
    for (const auto& f : report.folds) {
      report.mean.dsc += f.metrics.dsc;
      report.mean.precision += f.metrics.precision;
      report.mean.sensitivity += f.metrics.sensitivity;
      report.mean.specificity += f.metrics.specificity;
    }
    const double k = static_cast<double>(report.folds.size());
    report.mean = {report.mean.dsc / k, report.mean.precision / k, report.mean.sensitivity / k,
                   report.mean.specificity / k};
    report.pr = pr_from_counts(thresholds, pooled);

    nlohmann::json fold_json = nlohmann::json::array();
    for (const auto& f : report.folds) {
      auto j = metrics_json(f.metrics);
      j["fold"] = f.fold;
      fold_json.push_back(j);
    }
    variant_json[report.variant] = {{"mean", metrics_json(report.mean)},
                                    {"folds", fold_json},
                                    {"parameter_count", report.parameter_count}};
    if (!options.out_dir.empty()) write_pr_csv(options.out_dir / ("pr_" + report.variant + ".csv"), report.pr);
    result.reports.push_back(std::move(report));
  }

  result.summary = {{"config", options.config_echo},
                    {"k", options.k},
                    {"split_seed", options.split_seed},
                    {"threshold", options.threshold},
                    {"aggregation",
                     "scalar metrics are macro-averaged over test slices within a fold, then over folds; "
                     "PR curves pool confusion counts over all test slices of all folds"},
                    {"variants", variant_json},
                    {"fusion_ordering", fusion_ordering(result.reports)}};
  if (!options.out_dir.empty()) {
    write_metrics_csv(options.out_dir / "metrics.csv", result.reports);
    std::ofstream out(options.out_dir / "summary.json", std::ios::trunc);
    if (!out) throw FormatError("cannot write summary.json in '" + options.out_dir.string() + "'");
    out << result.summary.dump(2) << '\n';
  }
  return result;
}

}  // namespace hct::eval
