#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "hct/data.hpp"
#include "hct/errors.hpp"
#include "test_util.hpp"

namespace {

using hct::Tensor;
namespace data = hct::data;

std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Phantom, SeededDeterminism) {
  const auto a = data::generate_phantom(7, 2, 3, 64, 64);
  const auto b = data::generate_phantom(7, 2, 3, 64, 64);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.samples.size(), 6u);
  EXPECT_NE(a.samples[0].pet, data::generate_phantom(8, 2, 3, 64, 64).samples[0].pet);
}

TEST(Phantom, PatientIdsContiguous) {
  const auto ds = data::generate_phantom(1, 4, 2, 32, 32);
  EXPECT_EQ(ds.patient_ids(), (std::vector<int>{0, 1, 2, 3}));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) EXPECT_EQ(ds.samples[i].patient_id, static_cast<int>(i / 2));
}

TEST(Phantom, InvalidArguments) {
  EXPECT_THROW(data::generate_phantom(1, 1, 1, 60, 64), hct::DimensionError);
  EXPECT_THROW(data::generate_phantom(1, 0, 1, 64, 64), hct::ArgumentError);
}

// Measured over 200 samples: the foreground fraction stays in [0.005, 0.25],
// PET is hotter inside the mask than outside, and every sample is valid.
TEST(Phantom, MaskFractionAndPetContrast) {
  const auto ds = data::generate_phantom(2024, 50, 4, 64, 64);
  ASSERT_EQ(ds.samples.size(), 200u);
  for (const auto& s : ds.samples) {
    data::validate(s);
    double fg = 0, in = 0, out = 0;
    for (std::size_t i = 0; i < s.mask.size(); ++i) {
      if (s.mask[i] == 1.0) {
        fg += 1;
        in += s.pet[i];
      } else {
        out += s.pet[i];
      }
      ASSERT_GE(s.pet[i], 0.0);
    }
    const double frac = fg / static_cast<double>(s.mask.size());
    EXPECT_GE(frac, 0.005);
    EXPECT_LE(frac, 0.25);
    EXPECT_GT(in / fg, out / (static_cast<double>(s.mask.size()) - fg));
  }
}

TEST(Normalize, PetClampAndScale) {
  const Tensor y = data::normalize_pet(Tensor({4}, std::vector<double>{0.0, 30.0, 7.5, -2.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 1.0);
  EXPECT_DOUBLE_EQ(y[2], 0.5);
  EXPECT_EQ(y[3], 0.0);
}

TEST(Normalize, CtWindow) {
  const Tensor y = data::normalize_ct(Tensor({4}, std::vector<double>{-160, 240, 40, -1000}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 1.0);
  EXPECT_DOUBLE_EQ(y[2], 0.5);
  EXPECT_EQ(y[3], 0.0);
}

TEST(Normalize, NanIsDataError) {
  EXPECT_THROW(data::normalize_pet(Tensor({2}, std::vector<double>{1.0, std::nan("")})), hct::DataError);
  EXPECT_THROW(data::normalize_ct(Tensor({1}, std::nan(""))), hct::DataError);
}

TEST(Normalize, OutputsInUnitInterval) {
  std::mt19937_64 rng(3);
  const Tensor pet = data::normalize_pet(hct::testing::random_tensor({32, 32}, rng, -50, 50));
  const Tensor ct = data::normalize_ct(hct::testing::random_tensor({32, 32}, rng, -2000, 2000));
  for (double v : pet.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  for (double v : ct.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Resample, HandValuesAndIdentity) {
  const Tensor y = data::resample_pet_to_ct(Tensor({2, 2}, std::vector<double>{0, 1, 2, 3}), 3, 3);
  EXPECT_DOUBLE_EQ(y.at(1, 1), 1.5);
  std::mt19937_64 rng(4);
  const Tensor x = hct::testing::random_tensor({8, 8}, rng);
  EXPECT_EQ(data::resample_pet_to_ct(x, 8, 8), x);
  const Tensor up = data::resample_pet_to_ct(Tensor({4, 4}, 2.0), 16, 16);
  for (double v : up.values()) EXPECT_NEAR(v, 2.0, 1e-12);
  EXPECT_THROW(data::resample_pet_to_ct(Tensor({1, 4}, 1.0), 4, 4), hct::DimensionError);
}

TEST(Augment, DoubleFlipIsIdentity) {
  const auto ds = data::generate_phantom(5, 1, 1, 32, 32);
  data::AugmentOptions flip_only{1.0, 0.0, 0.8};
  std::mt19937_64 rng(1);
  const auto once = data::augment(ds.samples[0], rng, flip_only);
  EXPECT_NE(once.pet, ds.samples[0].pet);
  EXPECT_EQ(data::augment(once, rng, flip_only), ds.samples[0]);
}

TEST(Augment, ImageMaskAlignmentUnderFlip) {
  auto s = data::generate_phantom(6, 1, 1, 32, 32).samples[0];
  s.pet = s.mask;
  s.ct = s.mask;
  std::mt19937_64 rng(2);
  const auto a = data::augment(s, rng, {1.0, 0.0, 0.8});
  EXPECT_EQ(a.pet, a.mask);
  EXPECT_EQ(a.ct, a.mask);
}

TEST(Augment, ShapesAndBinaryMask) {
  const auto ds = data::generate_phantom(7, 2, 4, 64, 64);
  std::mt19937_64 rng(3);
  for (const auto& s : ds.samples) {
    for (int rep = 0; rep < 4; ++rep) {
      const auto a = data::augment(s, rng);
      EXPECT_NO_THROW(data::validate(a));
      EXPECT_EQ(a.pet.shape(), s.pet.shape());
    }
  }
}

TEST(DatasetIo, RoundTrip) {
  hct::testing::TempDir dir("ds");
  const auto ds = data::generate_phantom(9, 1, 2, 32, 32);
  data::write_dataset(ds, dir.path());
  EXPECT_EQ(data::read_dataset(dir.path()), ds);
}

TEST(DatasetIo, TruncatedPayloadNamesFile) {
  hct::testing::TempDir dir("trunc");
  data::write_dataset(data::generate_phantom(9, 1, 2, 32, 32), dir.path());
  std::filesystem::resize_file(dir / "ct_0001.f32", 100);
  try {
    data::read_dataset(dir.path());
    FAIL() << "expected FormatError";
  } catch (const hct::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("ct_0001.f32"), std::string::npos);
  }
}

TEST(DatasetIo, MissingMeta) {
  hct::testing::TempDir dir("nometa");
  EXPECT_THROW(data::read_dataset(dir.path()), hct::FormatError);
}

TEST(DatasetIo, LittleEndianRowMajorFloat32) {
  hct::testing::TempDir dir("bytes");
  data::Dataset ds;
  ds.meta.h = ds.meta.w = 2;
  ds.meta.n_patients = ds.meta.slices_per_patient = 1;
  ds.samples.push_back({Tensor({2, 2}, std::vector<double>{1.0, -2.0, 0.5, 3.0}), Tensor({2, 2}, 0.0),
                        Tensor({2, 2}, std::vector<double>{0, 1, 1, 0}), 0});
  data::write_dataset(ds, dir.path());
  const auto bytes = file_bytes(dir / "pet_0000.f32");
  ASSERT_EQ(bytes.size(), 16u);
  const float expected[4] = {1.0f, -2.0f, 0.5f, 3.0f};
  for (int i = 0; i < 4; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &expected[i], 4);
    for (int b = 0; b < 4; ++b) EXPECT_EQ(bytes[4 * i + b], (bits >> (8 * b)) & 0xffu);
  }
  EXPECT_EQ(file_bytes(dir / "mask_0000.u8"), (std::vector<unsigned char>{0, 1, 1, 0}));
}

TEST(DatasetIo, ChecksumIgnoresMeta) {
  hct::testing::TempDir a("ck_a"), b("ck_b");
  data::write_dataset(data::generate_phantom(3, 2, 2, 32, 32), a.path());
  data::write_dataset(data::generate_phantom(3, 2, 2, 32, 32), b.path());
  EXPECT_EQ(data::payload_checksum(a.path()), data::payload_checksum(b.path()));
  std::ofstream(a / "meta.json", std::ios::app) << "\n";
  EXPECT_EQ(data::payload_checksum(a.path()), data::payload_checksum(b.path()));
  data::write_dataset(data::generate_phantom(4, 2, 2, 32, 32), b.path());
  EXPECT_NE(data::payload_checksum(a.path()), data::payload_checksum(b.path()));
}

}  // namespace
