#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "hct/tensor.hpp"

namespace hct::data {

/// One paired slice. pet/ct/mask are (H, W); mask holds exactly 0 or 1.
/// pet is in SUV-like units and ct in HU-like units until normalized.
struct Sample {
  Tensor pet;
  Tensor ct;
  Tensor mask;
  int patient_id = 0;

  bool operator==(const Sample&) const = default;
};

/// Generator constants for the synthetic PET-CT phantoms. Lengths are
/// fractions of the image side.
struct PhantomParams {
  int min_tumors = 1;
  int max_tumors = 3;
  double tumor_axis_min = 0.12;
  double tumor_axis_max = 0.24;
  double max_foreground = 0.22;
  double tissue_hu = 40.0;
  double tumor_hu_contrast = 30.0;
  double ct_noise_hu = 8.0;
  double pet_background = 1.0;
  double pet_noise = 0.15;
  double tumor_suv_min = 4.0;
  double tumor_suv_max = 9.0;
  double hotspot_probability = 0.6;
  int distractors_min = 2;
  int distractors_max = 4;

  bool operator==(const PhantomParams&) const = default;
};

struct DatasetMeta {
  std::uint64_t seed = 0;
  std::size_t h = 0, w = 0;
  std::size_t n_patients = 0;
  std::size_t slices_per_patient = 0;
  PhantomParams phantom;
  int version = 1;

  bool operator==(const DatasetMeta&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;
  DatasetMeta meta;

  /// Distinct patient ids in first-appearance order.
  std::vector<int> patient_ids() const;
  bool operator==(const Dataset&) const = default;
};

/// Synthetic two-modality phantoms. Tumors are elliptical; PET shows smooth
/// hot blobs over them plus occasional false-positive hot spots, CT shows the
/// exact tumor extents at low contrast among similar-looking distractors.
/// PET is rendered at half resolution and resampled onto the CT grid.
Dataset generate_phantom(std::uint64_t seed, std::size_t n_patients, std::size_t slices_per_patient, std::size_t h,
                         std::size_t w, const PhantomParams& params = {});

inline constexpr double kSuvMax = 15.0;
inline constexpr double kHuMin = -160.0;
inline constexpr double kHuMax = 240.0;

/// Clamp to [0, 15] SUV, then scale to [0, 1].
Tensor normalize_pet(const Tensor& pet);
/// Clamp to [-160, 240] HU, then map affinely to [0, 1].
Tensor normalize_ct(const Tensor& ct);

/// Normalized copy of a sample (mask untouched).
Sample preprocess(const Sample& raw);

/// Bilinear (align-corners) resampling of a PET slice onto the CT grid.
Tensor resample_pet_to_ct(const Tensor& pet, std::size_t target_h, std::size_t target_w);

struct AugmentOptions {
  double flip_probability = 0.5;
  double crop_probability = 0.5;
  double min_crop_scale = 0.8;
};

/// Random horizontal flip and random crop-and-resize, applied identically to
/// pet, ct and mask. The mask is re-binarized at 0.5 after resizing.
Sample augment(const Sample& sample, std::mt19937_64& rng, const AugmentOptions& options = {});

/// Throws DataError/DimensionError when a sample violates the Sample invariants.
void validate(const Sample& sample);

/// Directory layout: meta.json, pet_{i:04}.f32, ct_{i:04}.f32, mask_{i:04}.u8.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// FNV-1a 64 over the payload files in index order (meta.json excluded).
std::uint64_t payload_checksum(const std::filesystem::path& dir);

}  // namespace hct::data
