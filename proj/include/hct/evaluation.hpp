#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hct/data.hpp"
#include "hct/model.hpp"
#include "hct/tensor.hpp"
#include "hct/training.hpp"

namespace hct::eval {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

/// Pixel counts for binary masks of equal shape; anything but 0/1 is an ArgumentError.
ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& gt_mask);

// Ratios in [0, 1]. A zero denominator means the ratio's condition holds
// vacuously (e.g. both masks empty), and the result is 1.
double dsc(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);
double sensitivity(const ConfusionCounts& c);
double specificity(const ConfusionCounts& c);

struct PrPoint {
  double threshold = 0, precision = 0, recall = 0;
};

/// 0.00, 0.01, ..., 1.00.
std::vector<double> default_thresholds();

/// Foreground iff prob >= threshold (ties go to foreground).
Tensor binarize(const Tensor& prob_map, double threshold);

/// Confusion counts at every threshold; probabilities outside [0, 1] are an ArgumentError.
std::vector<ConfusionCounts> threshold_counts(const Tensor& prob_map, const Tensor& gt_mask,
                                              const std::vector<double>& thresholds);
std::vector<PrPoint> pr_curve(const Tensor& prob_map, const Tensor& gt_mask,
                              const std::vector<double>& thresholds = default_thresholds());
/// Precision/recall from pooled (micro-averaged) counts.
std::vector<PrPoint> pr_from_counts(const std::vector<double>& thresholds, const std::vector<ConfusionCounts>& counts);

struct FoldSplit {
  std::vector<int> train_ids, test_ids;
};

/// Patient-level k-fold partition. Ids are shuffled with `seed`; fold sizes
/// differ by at most one. k > number of patients is an ArgumentError.
std::vector<FoldSplit> kfold_split(const std::vector<int>& patient_ids, std::size_t k, std::uint64_t seed);

/// Metric ratios in [0, 1].
struct ScalarMetrics {
  double dsc = 0, precision = 0, sensitivity = 0, specificity = 0;
};

ScalarMetrics metrics_of(const ConfusionCounts& c);

/// Maps a raw sample to its (H, W) foreground probability map.
using Predictor = std::function<Tensor(const data::Sample&)>;

/// Predictor that normalizes the sample and runs the model's forward pass.
Predictor model_predictor(const model::Model& model);

struct EvalResult {
  std::vector<ScalarMetrics> per_sample;
  ScalarMetrics mean;                        // macro average over samples
  std::vector<double> thresholds;
  std::vector<ConfusionCounts> pooled_counts;  // per threshold, summed over samples
  std::vector<PrPoint> pr;                   // micro-averaged
};

/// Binarizes at `threshold` for the scalar metrics (macro-averaged per
/// sample) and sweeps `thresholds` for the pooled PR curve.
EvalResult evaluate(const Predictor& predictor, const std::vector<data::Sample>& samples, double threshold = 0.5,
                    const std::vector<double>& thresholds = default_thresholds());

struct FoldMetrics {
  std::size_t fold = 0;
  ScalarMetrics metrics;
};

/// Per-variant fold scores, their mean and the PR curve pooled over all folds.
struct MetricsReport {
  std::string variant;
  std::vector<FoldMetrics> folds;
  ScalarMetrics mean;
  std::vector<PrPoint> pr;
  std::size_t parameter_count = 0;
};

struct AblationOptions {
  std::size_t k = 5;
  std::uint64_t split_seed = 0;
  double threshold = 0.5;
  std::filesystem::path out_dir;  // metrics.csv, pr_<variant>.csv, summary.json
  nlohmann::json config_echo = nlohmann::json::object();
};

struct AblationResult {
  std::vector<MetricsReport> reports;
  nlohmann::json summary;
};

/// k-fold train/evaluate for each variant. The base config's variant field is
/// replaced per run.
AblationResult ablation_run(const data::Dataset& dataset, const std::vector<model::Variant>& variants,
                            const model::ModelConfig& base, const train::TrainConfig& train_config,
                            const AblationOptions& options);

/// metrics.csv (percent values): variant,fold,dsc,precision,sensitivity,specificity.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports);
/// pr_<variant>.csv: threshold,precision,recall.
void write_pr_csv(const std::filesystem::path& path, const std::vector<PrPoint>& pr);

/// Whether mean DSC orders HF > EF > LF among the reports; "not evaluated"
/// when one of the three fusion families is absent.
nlohmann::json fusion_ordering(const std::vector<MetricsReport>& reports);

}  // namespace hct::eval
