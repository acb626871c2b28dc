#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hct/cli.hpp"
#include "hct/data.hpp"
#include "test_util.hpp"

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = hct::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

TEST(Cli, SynthCountAndChecksum) {
  hct::testing::TempDir dir("cli_synth");
  const auto a = run({"synth", "--seed", "7", "--patients", "20", "--slices", "4", "--size", "64", "--out",
                      (dir / "a").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("samples: 80"), std::string::npos);
  EXPECT_EQ(hct::data::read_dataset(dir / "a").samples.size(), 80u);
  const auto b = run({"synth", "--seed", "7", "--patients", "20", "--slices", "4", "--size", "64", "--out",
                      (dir / "b").string()});
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(hct::data::payload_checksum(dir / "a"), hct::data::payload_checksum(dir / "b"));
}

TEST(Cli, SizeNotDivisibleBy16) {
  hct::testing::TempDir dir("cli_size");
  const auto r = run({"synth", "--size", "60", "--out", dir.path().string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("multiple of 16"), std::string::npos);
}

TEST(Cli, UnwritableOutput) {
  hct::testing::TempDir dir("cli_ro");
  std::ofstream(dir / "file") << "x";
  const auto r = run({"synth", "--patients", "1", "--slices", "1", "--size", "32", "--out",
                      (dir / "file" / "sub").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, BogusVariantListsValidOnes) {
  hct::testing::TempDir dir("cli_variant");
  const auto r = run({"train", "--variant", "bogus", "--data", dir.path().string(), "--out", dir.path().string()});
  EXPECT_EQ(r.code, 2);
  for (const char* v : {"HCT", "EF-TN", "LF-TN", "EF-FCN", "LF-FCN", "HF-FCN"}) {
    EXPECT_NE(r.err.find(v), std::string::npos) << v;
  }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"fly"}).code, 2);
  EXPECT_EQ(run({"train", "--epochs", "many"}).code, 2);
  EXPECT_EQ(run({"train", "--out", "x"}).code, 2);  // no dataset
  EXPECT_EQ(run({"train", "--data", "/nonexistent/hct", "--out", "x"}).code, 2);
  EXPECT_EQ(run({"synth", "--help"}).code, 0);
}

TEST(Cli, ConfigFileWithFlagOverrides) {
  hct::testing::TempDir dir("cli_cfg");
  std::ofstream(dir / "cfg.json") << R"({"seed": 3, "patients": 2, "slices": 1, "size": 32, "out": ")"
                                  << (dir / "from_config").string() << "\"}";
  auto r = run({"synth", "--config", (dir / "cfg.json").string(), "--slices", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("samples: 4"), std::string::npos);
  std::ofstream(dir / "bad.json") << R"({"sede": 3})";
  r = run({"synth", "--config", (dir / "bad.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("sede"), std::string::npos);
}

TEST(Cli, TrainEvalAndMismatch) {
  hct::testing::TempDir dir("cli_train");
  const std::string data = (dir / "data").string(), out = (dir / "run").string();
  ASSERT_EQ(run({"synth", "--seed", "1", "--patients", "2", "--slices", "1", "--size", "32", "--out", data}).code, 0);
  const std::vector<std::string> train_args = {"train",   "--data",   data,       "--out",  out,
                                               "--d-embed", "16",   "--depth",  "1",      "--heads",
                                               "2",       "--epochs", "3",        "--lr",   "1e-3",
                                               "--no-timing"};
  auto r = run(train_args);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string log1 = read_file(dir / "run" / "train_log.csv");
  EXPECT_EQ(line_count(dir / "run" / "train_log.csv"), 4u);

  r = run(train_args);
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(read_file(dir / "run" / "train_log.csv"), log1);

  const std::string ckpt = (dir / "run" / "checkpoint.ckpt").string(), ev = (dir / "eval").string();
  r = run({"eval", "--data", data, "--checkpoint", ckpt, "--out", ev});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(dir / "eval" / "metrics.csv"), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "eval" / "pr_HCT.csv"));
  const auto summary = nlohmann::json::parse(read_file(dir / "eval" / "summary.json"));
  EXPECT_EQ(summary["config"]["run"]["checkpoint"], ckpt);

  r = run({"eval", "--data", data, "--checkpoint", ckpt, "--out", ev, "--d-embed", "32"});
  EXPECT_EQ(r.code, 2);
  r = run({"eval", "--data", data, "--checkpoint", ckpt, "--out", ev, "--variant", "EF-TN"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, NumericalFailureExitCode) {
  hct::testing::TempDir dir("cli_nan");
  const std::string data = (dir / "data").string();
  ASSERT_EQ(run({"synth", "--patients", "1", "--slices", "2", "--size", "32", "--out", data}).code, 0);
  const auto r = run({"train", "--data", data, "--out", (dir / "run").string(), "--d-embed", "16", "--depth", "1",
                      "--heads", "2", "--epochs", "3", "--lr", "1e300"});
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("step"), std::string::npos);
}

TEST(Cli, AblateRowCountAndEcho) {
  hct::testing::TempDir dir("cli_ablate");
  const std::string data = (dir / "data").string(), out = (dir / "ab").string();
  ASSERT_EQ(run({"synth", "--seed", "2", "--patients", "5", "--slices", "1", "--size", "32", "--out", data}).code, 0);
  const auto r = run({"ablate", "--data", data, "--out", out, "--d-embed", "8", "--depth", "1", "--heads", "2",
                      "--epochs", "1", "--no-timing"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(dir / "ab" / "metrics.csv"), 16u);  // header + 3 variants x 5 folds
  const auto summary = nlohmann::json::parse(read_file(dir / "ab" / "summary.json"));
  EXPECT_EQ(summary["config"]["run"]["data"], data);
  EXPECT_EQ(summary["config"]["train"]["epochs"], 1);
  EXPECT_TRUE(summary["fusion_ordering"]["transformer"].contains("observed"));
}

TEST(Cli, GradcheckExitCodes) {
  auto r = run({"gradcheck", "--ops", "layer_norm,mlp_block"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("layer_norm"), std::string::npos);
  r = run({"gradcheck", "--ops", "layer_norm,mlp_block", "--perturb-op", "mlp_block"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("mlp_block"), std::string::npos);
  EXPECT_NE(r.err.find("seed"), std::string::npos);
}

}  // namespace
