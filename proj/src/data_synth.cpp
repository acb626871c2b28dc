#include <algorithm>
#include <cmath>
#include <string>

#include "hct/data.hpp"
#include "hct/errors.hpp"
#include "hct/primitives.hpp"

namespace hct::data {

namespace {

struct Ellipse {
  double cy = 0, cx = 0;  // center, pixels
  double ay = 1, ax = 1;  // semi-axes, pixels
  double theta = 0;       // rotation, radians

  // Squared normalized radius; < 1 inside, 1 on the boundary.
  double radius2(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dy + s * dx) / ay;
    const double v = (-s * dy + c * dx) / ax;
    return u * u + v * v;
  }
  bool contains(double y, double x) const { return radius2(y, x) <= 1.0; }
  double area() const { return 3.14159265358979323846 * ay * ax; }
};

struct Blob {
  double cy = 0, cx = 0, sigma = 1, peak = 0;
};

struct Tumor {
  Ellipse shape;
  double peak_suv = 0;
};

struct Distractor {
  Ellipse shape;
  double hu_delta = 0;
};

struct PatientAnatomy {
  Ellipse body;
  std::vector<Tumor> tumors;
  std::vector<Distractor> distractors;
  std::vector<Blob> hotspots;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

bool far_apart(const Ellipse& a, const Ellipse& b, double margin) {
  const double d = std::hypot(a.cy - b.cy, a.cx - b.cx);
  return d > std::max(a.ay, a.ax) + std::max(b.ay, b.ax) + margin;
}

// A random point whose normalized body radius is at most `max_r`.
std::pair<double, double> point_in_body(const Ellipse& body, double max_r, std::mt19937_64& rng) {
  const double r = max_r * std::sqrt(uniform(rng, 0.0, 1.0));
  const double phi = uniform(rng, 0.0, 2.0 * 3.14159265358979323846);
  const double u = r * std::cos(phi) * body.ay, v = r * std::sin(phi) * body.ax;
  const double c = std::cos(body.theta), s = std::sin(body.theta);
  return {body.cy + c * u - s * v, body.cx + s * u + c * v};
}

PatientAnatomy sample_anatomy(std::mt19937_64& rng, std::size_t h, std::size_t w, const PhantomParams& p) {
  const double side = static_cast<double>(std::min(h, w));
  PatientAnatomy a;
  a.body.cy = (static_cast<double>(h) - 1.0) / 2.0 + uniform(rng, -0.03, 0.03) * static_cast<double>(h);
  a.body.cx = (static_cast<double>(w) - 1.0) / 2.0 + uniform(rng, -0.03, 0.03) * static_cast<double>(w);
  a.body.ay = uniform(rng, 0.40, 0.46) * static_cast<double>(h);
  a.body.ax = uniform(rng, 0.40, 0.46) * static_cast<double>(w);
  a.body.theta = uniform(rng, -0.2, 0.2);

  const double max_area = p.max_foreground * static_cast<double>(h * w);
  const int n_tumors = uniform_int(rng, p.min_tumors, p.max_tumors);
  for (;;) {
    a.tumors.clear();
    double area = 0.0;
    for (int attempt = 0; attempt < 1000 && static_cast<int>(a.tumors.size()) < n_tumors; ++attempt) {
      Tumor t;
      std::tie(t.shape.cy, t.shape.cx) = point_in_body(a.body, 0.55, rng);
      t.shape.ay = uniform(rng, p.tumor_axis_min, p.tumor_axis_max) * side;
      t.shape.ax = uniform(rng, p.tumor_axis_min, p.tumor_axis_max) * side;
      t.shape.theta = uniform(rng, 0.0, 3.14159265358979323846);
      t.peak_suv = uniform(rng, p.tumor_suv_min, p.tumor_suv_max);
      const bool clear = std::all_of(a.tumors.begin(), a.tumors.end(),
                                     [&](const Tumor& o) { return far_apart(t.shape, o.shape, 2.0); });
      if (clear) {
        a.tumors.push_back(t);
        area += t.shape.area();
      }
    }
    if (!a.tumors.empty() && area <= max_area) break;
  }

  const int n_distractors = uniform_int(rng, p.distractors_min, p.distractors_max);
  for (int attempt = 0; attempt < 1000 && static_cast<int>(a.distractors.size()) < n_distractors; ++attempt) {
    Distractor d;
    std::tie(d.shape.cy, d.shape.cx) = point_in_body(a.body, 0.7, rng);
    d.shape.ay = uniform(rng, 0.05, 0.14) * side;
    d.shape.ax = uniform(rng, 0.05, 0.14) * side;
    d.shape.theta = uniform(rng, 0.0, 3.14159265358979323846);
    // Half of the distractors mimic the tumor's CT contrast exactly.
    d.hu_delta = uniform(rng, 0.0, 1.0) < 0.5 ? p.tumor_hu_contrast : -uniform(rng, 20.0, 40.0);
    const bool clear = std::all_of(a.tumors.begin(), a.tumors.end(),
                                   [&](const Tumor& t) { return far_apart(d.shape, t.shape, 1.0); });
    if (clear) a.distractors.push_back(d);
  }

  const int n_hot = uniform_int(rng, 1, 2);
  for (int attempt = 0; attempt < 1000 && static_cast<int>(a.hotspots.size()) < n_hot; ++attempt) {
    Blob b;
    std::tie(b.cy, b.cx) = point_in_body(a.body, 0.75, rng);
    b.sigma = uniform(rng, 0.03, 0.06) * side;
    b.peak = uniform(rng, 3.0, 7.0);
    Ellipse probe{b.cy, b.cx, 2.0 * b.sigma, 2.0 * b.sigma, 0.0};
    const bool clear = std::all_of(a.tumors.begin(), a.tumors.end(),
                                   [&](const Tumor& t) { return far_apart(probe, t.shape, 1.0); });
    if (clear) a.hotspots.push_back(b);
  }
  return a;
}

Sample render_slice(const PatientAnatomy& anatomy, std::size_t slice, std::size_t n_slices, std::size_t h,
                    std::size_t w, const PhantomParams& p, std::mt19937_64& rng) {
  // Tumors shrink toward the first and last slice of a patient.
  const double half = std::max(1.0, static_cast<double>(n_slices - 1) / 2.0);
  const double offset = std::abs(static_cast<double>(slice) - static_cast<double>(n_slices - 1) / 2.0) / half;
  const double scale = 1.0 - 0.1 * offset;
  std::normal_distribution<double> jitter(0.0, 0.5);

  std::vector<Tumor> tumors = anatomy.tumors;
  for (auto& t : tumors) {
    t.shape.ay *= scale;
    t.shape.ax *= scale;
    t.shape.cy += jitter(rng);
    t.shape.cx += jitter(rng);
  }
  std::vector<Blob> hotspots;
  for (const auto& b : anatomy.hotspots) {
    if (uniform(rng, 0.0, 1.0) < p.hotspot_probability) hotspots.push_back(b);
  }

  Sample s;
  s.mask = Tensor({h, w});
  s.ct = Tensor({h, w});
  std::normal_distribution<double> ct_noise(0.0, p.ct_noise_hu);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      double hu = anatomy.body.contains(fy, fx) ? p.tissue_hu : -1000.0;
      for (const auto& d : anatomy.distractors) {
        if (d.shape.contains(fy, fx)) hu = p.tissue_hu + d.hu_delta;
      }
      bool tumor = false;
      for (const auto& t : tumors) tumor = tumor || t.shape.contains(fy, fx);
      if (tumor) hu = p.tissue_hu + p.tumor_hu_contrast;
      s.mask[y * w + x] = tumor ? 1.0 : 0.0;
      s.ct[y * w + x] = to_float_precision(hu + ct_noise(rng));
    }
  }

  // PET at half resolution; source pixel (i, j) sits at CT coordinates
  // (i * (h-1)/(ph-1), j * (w-1)/(pw-1)) under the align-corners convention.
  const std::size_t ph = h / 2, pw = w / 2;
  Tensor pet_low({ph, pw});
  std::normal_distribution<double> pet_noise(0.0, p.pet_noise);
  const double sy = static_cast<double>(h - 1) / static_cast<double>(ph - 1);
  const double sx = static_cast<double>(w - 1) / static_cast<double>(pw - 1);
  for (std::size_t i = 0; i < ph; ++i) {
    for (std::size_t j = 0; j < pw; ++j) {
      const double fy = static_cast<double>(i) * sy, fx = static_cast<double>(j) * sx;
      double suv = anatomy.body.contains(fy, fx) ? p.pet_background + pet_noise(rng) : 0.05 * std::abs(pet_noise(rng));
      for (const auto& t : tumors) {
        // Falloff scale 0.6: the blob is at ~25% of its peak on the tumor edge.
        suv += t.peak_suv * std::exp(-t.shape.radius2(fy, fx) / (2.0 * 0.36));
      }
      for (const auto& b : hotspots) {
        const double d2 = (fy - b.cy) * (fy - b.cy) + (fx - b.cx) * (fx - b.cx);
        suv += b.peak * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
      }
      pet_low[i * pw + j] = std::max(0.0, suv);
    }
  }
  s.pet = resample_pet_to_ct(pet_low, h, w);
  for (auto& v : s.pet.values()) v = to_float_precision(std::max(0.0, v));
  return s;
}

}  // namespace

std::vector<int> Dataset::patient_ids() const {
  std::vector<int> ids;
  for (const auto& s : samples) {
    if (std::find(ids.begin(), ids.end(), s.patient_id) == ids.end()) ids.push_back(s.patient_id);
  }
  return ids;
}

Dataset generate_phantom(std::uint64_t seed, std::size_t n_patients, std::size_t slices_per_patient, std::size_t h,
                         std::size_t w, const PhantomParams& params) {
  if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0) {
    throw DimensionError("phantom size must be a positive multiple of 16, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  if (n_patients < 1) throw ArgumentError("phantom generation needs at least 1 patient");
  if (slices_per_patient < 1) throw ArgumentError("phantom generation needs at least 1 slice per patient");

  Dataset ds;
  ds.meta.seed = seed;
  ds.meta.h = h;
  ds.meta.w = w;
  ds.meta.n_patients = n_patients;
  ds.meta.slices_per_patient = slices_per_patient;
  ds.meta.phantom = params;
  const auto lo = static_cast<std::uint32_t>(seed), hi = static_cast<std::uint32_t>(seed >> 32);
  for (std::size_t patient = 0; patient < n_patients; ++patient) {
    std::seed_seq anatomy_seq{lo, hi, static_cast<std::uint32_t>(patient), 0u};
    std::mt19937_64 anatomy_rng(anatomy_seq);
    const PatientAnatomy anatomy = sample_anatomy(anatomy_rng, h, w, params);
    for (std::size_t slice = 0; slice < slices_per_patient; ++slice) {
      std::seed_seq slice_seq{lo, hi, static_cast<std::uint32_t>(patient), static_cast<std::uint32_t>(slice + 1)};
      std::mt19937_64 slice_rng(slice_seq);
      Sample s = render_slice(anatomy, slice, slices_per_patient, h, w, params, slice_rng);
      s.patient_id = static_cast<int>(patient);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

namespace {

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw DataError(std::string(what) + " contains non-finite values");
}

}  // namespace

Tensor normalize_pet(const Tensor& pet) {
  require_finite(pet, "PET image");
  Tensor out = pet;
  for (auto& v : out.values()) v = std::clamp(v, 0.0, kSuvMax) / kSuvMax;
  return out;
}

Tensor normalize_ct(const Tensor& ct) {
  require_finite(ct, "CT image");
  Tensor out = ct;
  for (auto& v : out.values()) v = (std::clamp(v, kHuMin, kHuMax) - kHuMin) / (kHuMax - kHuMin);
  return out;
}

Sample preprocess(const Sample& raw) {
  return {normalize_pet(raw.pet), normalize_ct(raw.ct), raw.mask, raw.patient_id};
}

Tensor resample_pet_to_ct(const Tensor& pet, std::size_t target_h, std::size_t target_w) {
  if (pet.rank() != 2) throw DimensionError("PET slice must be 2D, got " + to_string(pet.shape()));
  if (pet.dim(0) < 2 || pet.dim(1) < 2 || target_h < 2 || target_w < 2) {
    throw DimensionError("PET resampling needs source and target dims >= 2");
  }
  return nn::bilinear_resize(pet, target_h, target_w);
}

void validate(const Sample& sample) {
  if (sample.pet.rank() != 2 || sample.ct.shape() != sample.pet.shape() || sample.mask.shape() != sample.pet.shape()) {
    throw DimensionError("sample images must share one 2D shape: pet " + to_string(sample.pet.shape()) + ", ct " +
                         to_string(sample.ct.shape()) + ", mask " + to_string(sample.mask.shape()));
  }
  for (double v : sample.mask.values()) {
    if (v != 0.0 && v != 1.0) throw DataError("mask values must be exactly 0 or 1");
  }
  require_finite(sample.pet, "PET image");
  require_finite(sample.ct, "CT image");
}

namespace {

Tensor flip_columns(const Tensor& img) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = img[y * w + (w - 1 - x)];
  return out;
}

Tensor crop(const Tensor& img, std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw) {
  const std::size_t w = img.dim(1);
  Tensor out({ch, cw});
  for (std::size_t y = 0; y < ch; ++y)
    for (std::size_t x = 0; x < cw; ++x) out[y * cw + x] = img[(y0 + y) * w + x0 + x];
  return out;
}

}  // namespace

Sample augment(const Sample& sample, std::mt19937_64& rng, const AugmentOptions& options) {
  validate(sample);
  const std::size_t h = sample.pet.dim(0), w = sample.pet.dim(1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Sample out = sample;
  if (unit(rng) < options.flip_probability) {
    out.pet = flip_columns(out.pet);
    out.ct = flip_columns(out.ct);
    out.mask = flip_columns(out.mask);
  }
  if (unit(rng) < options.crop_probability && h >= 2 && w >= 2) {
    const double sy = options.min_crop_scale + (1.0 - options.min_crop_scale) * unit(rng);
    const double sx = options.min_crop_scale + (1.0 - options.min_crop_scale) * unit(rng);
    const auto ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(sy * static_cast<double>(h))), 2, h);
    const auto cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(sx * static_cast<double>(w))), 2, w);
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, h - ch)(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, w - cw)(rng);
    out.pet = nn::bilinear_resize(crop(out.pet, y0, x0, ch, cw), h, w);
    out.ct = nn::bilinear_resize(crop(out.ct, y0, x0, ch, cw), h, w);
    out.mask = nn::bilinear_resize(crop(out.mask, y0, x0, ch, cw), h, w);
    for (auto& v : out.mask.values()) v = v >= 0.5 ? 1.0 : 0.0;
  }
  return out;
}

}  // namespace hct::data
