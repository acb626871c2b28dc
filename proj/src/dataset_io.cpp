#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "hct/data.hpp"
#include "hct/errors.hpp"

namespace hct::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string indexed_name(const char* stem, std::size_t i, const char* ext) {
  std::array<char, 64> buf{};
  std::snprintf(buf.data(), buf.size(), "%s_%04zu.%s", stem, i, ext);
  return buf.data();
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("missing payload file '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<unsigned char> encode_f32(const Tensor& t) {
  std::vector<unsigned char> bytes;
  bytes.reserve(t.size() * 4);
  for (double v : t.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<unsigned char>(bits >> (8 * k)));
  }
  return bytes;
}

Tensor decode_f32(const std::vector<unsigned char>& bytes, std::size_t h, std::size_t w, const fs::path& path) {
  if (bytes.size() != h * w * 4) {
    throw FormatError("payload '" + path.string() + "' has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(h * w * 4));
  }
  Tensor t({h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[i * 4 + k]) << (8 * k);
    t[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return t;
}

json phantom_to_json(const PhantomParams& p) {
  return {{"min_tumors", p.min_tumors},
          {"max_tumors", p.max_tumors},
          {"tumor_axis_min", p.tumor_axis_min},
          {"tumor_axis_max", p.tumor_axis_max},
          {"max_foreground", p.max_foreground},
          {"tissue_hu", p.tissue_hu},
          {"tumor_hu_contrast", p.tumor_hu_contrast},
          {"ct_noise_hu", p.ct_noise_hu},
          {"pet_background", p.pet_background},
          {"pet_noise", p.pet_noise},
          {"tumor_suv_min", p.tumor_suv_min},
          {"tumor_suv_max", p.tumor_suv_max},
          {"hotspot_probability", p.hotspot_probability},
          {"distractors_min", p.distractors_min},
          {"distractors_max", p.distractors_max}};
}

PhantomParams phantom_from_json(const json& j) {
  PhantomParams p;
  p.min_tumors = j.value("min_tumors", p.min_tumors);
  p.max_tumors = j.value("max_tumors", p.max_tumors);
  p.tumor_axis_min = j.value("tumor_axis_min", p.tumor_axis_min);
  p.tumor_axis_max = j.value("tumor_axis_max", p.tumor_axis_max);
  p.max_foreground = j.value("max_foreground", p.max_foreground);
  p.tissue_hu = j.value("tissue_hu", p.tissue_hu);
  p.tumor_hu_contrast = j.value("tumor_hu_contrast", p.tumor_hu_contrast);
  p.ct_noise_hu = j.value("ct_noise_hu", p.ct_noise_hu);
  p.pet_background = j.value("pet_background", p.pet_background);
  p.pet_noise = j.value("pet_noise", p.pet_noise);
  p.tumor_suv_min = j.value("tumor_suv_min", p.tumor_suv_min);
  p.tumor_suv_max = j.value("tumor_suv_max", p.tumor_suv_max);
  p.hotspot_probability = j.value("hotspot_probability", p.hotspot_probability);
  p.distractors_min = j.value("distractors_min", p.distractors_min);
  p.distractors_max = j.value("distractors_max", p.distractors_max);
  return p;
}

}  // namespace

void write_dataset(const Dataset& dataset, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create dataset directory '" + dir.string() + "': " + ec.message());

  const auto& meta = dataset.meta;
  json ids = json::array();
  for (const auto& s : dataset.samples) {
    validate(s);
    if (s.pet.dim(0) != meta.h || s.pet.dim(1) != meta.w) {
      throw DimensionError("sample shape " + to_string(s.pet.shape()) + " disagrees with dataset meta " +
                           std::to_string(meta.h) + "x" + std::to_string(meta.w));
    }
    ids.push_back(s.patient_id);
  }
  json j = {{"version", meta.version},
            {"seed", meta.seed},
            {"h", meta.h},
            {"w", meta.w},
            {"n_samples", dataset.samples.size()},
            {"n_patients", meta.n_patients},
            {"slices_per_patient", meta.slices_per_patient},
            {"patient_ids", ids},
            {"phantom", phantom_to_json(meta.phantom)}};
  {
    std::ofstream out(dir / "meta.json", std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + (dir / "meta.json").string() + "'");
    out << j.dump(2) << '\n';
  }
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    write_bytes(dir / indexed_name("pet", i, "f32"), encode_f32(s.pet));
    write_bytes(dir / indexed_name("ct", i, "f32"), encode_f32(s.ct));
    std::vector<unsigned char> mask(s.mask.size());
    for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = s.mask[k] != 0.0 ? 1 : 0;
    write_bytes(dir / indexed_name("mask", i, "u8"), mask);
  }
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw FormatError("missing dataset meta file '" + meta_path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("malformed '" + meta_path.string() + "': " + e.what());
  }

  Dataset ds;
  std::vector<int> ids;
  try {
    ds.meta.version = j.at("version").get<int>();
    ds.meta.seed = j.at("seed").get<std::uint64_t>();
    ds.meta.h = j.at("h").get<std::size_t>();
    ds.meta.w = j.at("w").get<std::size_t>();
    ds.meta.n_patients = j.value("n_patients", std::size_t{0});
    ds.meta.slices_per_patient = j.value("slices_per_patient", std::size_t{0});
    if (j.contains("phantom")) ds.meta.phantom = phantom_from_json(j.at("phantom"));
    ids = j.at("patient_ids").get<std::vector<int>>();
    if (j.at("n_samples").get<std::size_t>() != ids.size()) {
      throw FormatError("'" + meta_path.string() + "': n_samples disagrees with patient_ids length");
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed '" + meta_path.string() + "': " + e.what());
  }
  if (ds.meta.h == 0 || ds.meta.w == 0) throw FormatError("'" + meta_path.string() + "': image dims must be positive");

  const std::size_t h = ds.meta.h, w = ds.meta.w;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Sample s;
    s.patient_id = ids[i];
    const fs::path pet_path = dir / indexed_name("pet", i, "f32");
    const fs::path ct_path = dir / indexed_name("ct", i, "f32");
    const fs::path mask_path = dir / indexed_name("mask", i, "u8");
    s.pet = decode_f32(read_bytes(pet_path), h, w, pet_path);
    s.ct = decode_f32(read_bytes(ct_path), h, w, ct_path);
    const auto mask = read_bytes(mask_path);
    if (mask.size() != h * w) {
      throw FormatError("payload '" + mask_path.string() + "' has " + std::to_string(mask.size()) +
                        " bytes, expected " + std::to_string(h * w));
    }
    s.mask = Tensor({h, w});
    for (std::size_t k = 0; k < mask.size(); ++k) {
      if (mask[k] > 1) throw FormatError("payload '" + mask_path.string() + "' holds a non-binary mask value");
      s.mask[k] = mask[k];
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::uint64_t payload_checksum(const fs::path& dir) {
  const Dataset ds = read_dataset(dir);
  std::uint64_t hash = 1469598103934665603ULL;
  auto mix = [&](const std::vector<unsigned char>& bytes) {
    for (unsigned char b : bytes) {
      hash ^= b;
      hash *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    mix(read_bytes(dir / indexed_name("pet", i, "f32")));
    mix(read_bytes(dir / indexed_name("ct", i, "f32")));
    mix(read_bytes(dir / indexed_name("mask", i, "u8")));
  }
  return hash;
}

}  // namespace hct::data
