#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

// Central finite-difference checks of the analytic gradients.

namespace hct::gradcheck {

struct Options {
  std::size_t seeds = 5;
  std::uint64_t base_seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Absolute error below which a tensor passes whatever its norm; the
  /// relative error's denominator is floored at floor / tolerance.
  double floor = 1e-7;
  /// Fraction of each parameter tensor probed in the end-to-end model check.
  double model_fraction = 0.01;
  /// Ops to run; empty means all.
  std::vector<std::string> ops;
  /// Scales the analytic gradient of this op by 1.001 (fault injection for
  /// testing the checker itself).
  std::string perturb_op;
};

struct OpResult {
  std::string op;
  std::size_t seeds = 0;
  std::size_t probes = 0;        // finite-difference evaluations per sign
  double max_rel_error = 0;      // worst tensor over all seeds
  std::string worst_tensor;
  std::uint64_t worst_seed = 0;
  bool passed = false;
};

struct Report {
  std::vector<OpResult> ops;
  bool passed() const;
};

/// conv2d, residual_block, layer_norm, msa, mlp_block, transformer_module,
/// segmentation_head, hct_tiny.
std::vector<std::string> op_names();

/// ||a - n|| / max(||a||, ||n||, denominator_floor) over the probed entries.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                      double denominator_floor);

/// Unknown op names are an ArgumentError.
Report run(const Options& options);

}  // namespace hct::gradcheck
