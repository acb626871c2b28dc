#include <algorithm>
#include <random>

#include "hct/errors.hpp"
#include "hct/evaluation.hpp"

namespace hct::eval {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

ConfusionCounts confusion(const Tensor& pred_mask, const Tensor& gt_mask) {
  if (pred_mask.shape() != gt_mask.shape()) {
    throw ArgumentError("confusion: shape mismatch " + to_string(pred_mask.shape()) + " vs " +
                        to_string(gt_mask.shape()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred_mask.size(); ++i) {
    const double p = pred_mask[i], g = gt_mask[i];
    if ((p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0)) throw ArgumentError("confusion: masks must be binary");
    if (p == 1.0) {
      (g == 1.0 ? c.tp : c.fp) += 1;
    } else {
      (g == 1.0 ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double dsc(const ConfusionCounts& c) { return ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn); }
double precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp); }
double sensitivity(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn); }
double specificity(const ConfusionCounts& c) { return ratio(c.tn, c.tn + c.fp); }

ScalarMetrics metrics_of(const ConfusionCounts& c) { return {dsc(c), precision(c), sensitivity(c), specificity(c)}; }

std::vector<double> default_thresholds() {
  std::vector<double> t(101);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i) / 100.0;
  return t;
}

Tensor binarize(const Tensor& prob_map, double threshold) {
  Tensor out(prob_map.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = prob_map[i] >= threshold ? 1.0 : 0.0;
  return out;
}

std::vector<ConfusionCounts> threshold_counts(const Tensor& prob_map, const Tensor& gt_mask,
                                              const std::vector<double>& thresholds) {
  if (prob_map.shape() != gt_mask.shape()) {
    throw ArgumentError("PR curve: shape mismatch " + to_string(prob_map.shape()) + " vs " +
                        to_string(gt_mask.shape()));
  }
  for (double p : prob_map.values()) {
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("PR curve: probabilities must lie in [0, 1]");
  }
  std::vector<ConfusionCounts> counts;
  counts.reserve(thresholds.size());
  for (double t : thresholds) counts.push_back(confusion(binarize(prob_map, t), gt_mask));
  return counts;
}

std::vector<PrPoint> pr_from_counts(const std::vector<double>& thresholds, const std::vector<ConfusionCounts>& counts) {
  if (thresholds.size() != counts.size()) throw ArgumentError("PR curve: threshold and count lists differ in length");
  std::vector<PrPoint> out;
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    out.push_back({thresholds[i], precision(counts[i]), sensitivity(counts[i])});
  }
  return out;
}

std::vector<PrPoint> pr_curve(const Tensor& prob_map, const Tensor& gt_mask, const std::vector<double>& thresholds) {
  return pr_from_counts(thresholds, threshold_counts(prob_map, gt_mask, thresholds));
}

std::vector<FoldSplit> kfold_split(const std::vector<int>& patient_ids, std::size_t k, std::uint64_t seed) {
  std::vector<int> ids = patient_ids;
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ArgumentError("kfold_split: duplicate patient id");
  if (k < 2) throw ArgumentError("kfold_split needs k >= 2");
  if (k > ids.size()) {
    throw ArgumentError("kfold_split: k = " + std::to_string(k) + " exceeds " + std::to_string(ids.size()) +
                        " patients");
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x6b66u};
  std::mt19937_64 rng(seq);
  std::shuffle(ids.begin(), ids.end(), rng);

  std::vector<FoldSplit> folds(k);
  const std::size_t base = ids.size() / k, extra = ids.size() % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    folds[f].test_ids.assign(ids.begin() + static_cast<long>(pos), ids.begin() + static_cast<long>(pos + len));
    std::sort(folds[f].test_ids.begin(), folds[f].test_ids.end());
    pos += len;
  }
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) folds[f].train_ids.insert(folds[f].train_ids.end(), folds[g].test_ids.begin(), folds[g].test_ids.end());
    }
    std::sort(folds[f].train_ids.begin(), folds[f].train_ids.end());
  }
  return folds;
}

}  // namespace hct::eval
