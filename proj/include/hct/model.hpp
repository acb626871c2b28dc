#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hct/layers.hpp"
#include "hct/param_store.hpp"

namespace hct::model {

using ad::Var;

/// Fusion topology. HF-TN is the hyper-connected transformer itself and
/// parses to Variant::HCT.
enum class Variant { HCT, EF_TN, LF_TN, EF_FCN, LF_FCN, HF_FCN };

std::string to_string(Variant v);
/// Accepts the canonical names plus "HF-TN"; unknown names throw ConfigError
/// listing the valid ones.
Variant parse_variant(const std::string& name);
std::vector<std::string> variant_names();

struct ModelConfig {
  std::size_t h = 64, w = 64;
  std::size_t d_embed = 256;
  std::size_t depth = 4;  // encoder and decoder stacks alike
  std::size_t n_heads = 4;
  std::array<std::size_t, 4> backbone_widths{16, 32, 64, 128};
  std::size_t n_classes = 2;
  Variant variant = Variant::HCT;
  std::uint64_t seed = 0;  // parameter initialization

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  std::size_t grid_h() const { return h / 16; }
  std::size_t grid_w() const { return w / 16; }
  std::size_t n_tokens() const { return grid_h() * grid_w(); }

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig defaults = {});

/// Four stride-2 stages: stem conv, then three strided residual blocks.
struct Backbone {
  nn::Conv2d stem;
  nn::GroupNorm stem_norm;
  nn::ResidualBlock stage2, stage3, stage4;

  struct Output {
    Var deep;  // (B, widths[3], H/16, W/16)
    Var skip;  // (B, widths[1], H/4, W/4)
  };

  static Backbone create(nn::ParamStore& store, const std::string& prefix, std::size_t in_ch,
                         const std::array<std::size_t, 4>& widths, std::mt19937_64& rng);
  Output operator()(const Var& image) const;
};

/// Backbone -> 1x1 projection to D -> tokens + positional table -> transformer stack.
struct EncoderBranch {
  Backbone backbone;
  nn::Conv2d projection;
  Var positional;  // (N, D)
  nn::TransformerStack stack;

  struct Output {
    Var tokens;     // (B, N, D) after the stack
    Var embedded;   // (B, N, D) projected tokens plus positions
    Var skip;
  };

  static EncoderBranch create(nn::ParamStore& store, const std::string& prefix, std::size_t in_ch,
                              const ModelConfig& cfg, std::mt19937_64& rng);
  Output operator()(const Var& image) const;
};

/// Joint attention over the PET, CT and concatenated-branch tokens. The three
/// (N, D) streams are stacked to 3N tokens in that order, offset by a fresh
/// (3N, D) positional table, run through the stack, split back into aligned
/// N-token streams and averaged.
struct HyperDecoder {
  Var positional;  // (3N, D)
  nn::TransformerStack stack;

  static HyperDecoder create(nn::ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                             std::mt19937_64& rng);
  Var operator()(const Var& pet, const Var& ct, const Var& con, std::vector<Tensor>* attention = nullptr) const;
};

/// Two 3x3 convs (D -> D/2 -> D/4), upsample to H/4, add the 1x1-projected
/// skip feature, upsample to (H, W), 1x1 classifier, pixel-wise softmax.
struct SegmentationHead {
  nn::Conv2d conv1, conv2, skip_proj, classifier;

  static SegmentationHead create(nn::ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                                 std::size_t skip_channels, std::mt19937_64& rng);
  /// `features` is a (B, D, H/16, W/16) map.
  Var operator()(const Var& features, const Var& skip, std::size_t h, std::size_t w) const;
  Var from_tokens(const Var& tokens, const Var& skip, std::size_t h, std::size_t w) const;
};

/// Optional record of intermediate values for inspection in tests.
struct ForwardTrace {
  std::vector<Tensor> branch_tokens;       // per encoder branch, (B, N, D)
  std::size_t decoder_tokens = 0;          // token count seen by decoder attention
  std::vector<Tensor> decoder_attention;   // (3N, 3N) per layer/batch/head
  Tensor decoder_output;                   // (B, N, D)
};

class Network {
 public:
  virtual ~Network() = default;
  /// pet and ct are (B, 1, H, W); returns (B, 2, H, W) probabilities.
  virtual Var forward(const Var& pet, const Var& ct, ForwardTrace* trace) const = 0;
  /// Every transformer module in the network.
  virtual std::vector<const nn::TransformerModule*> transformer_modules() const = 0;
  /// Every segmentation head in the network.
  virtual std::vector<const SegmentationHead*> heads() const = 0;
};

class Model {
 public:
  /// Builds the network for `config.variant` with seeded initialization.
  /// Parameters start at float32 precision.
  static Model build(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  nn::ParamStore& params() noexcept { return store_; }
  const nn::ParamStore& params() const noexcept { return store_; }
  std::size_t parameter_count() const { return store_.scalar_count(); }

  /// pet and ct are normalized (B, 1, H, W) tensors.
  Var forward(const Tensor& pet, const Tensor& ct, ForwardTrace* trace = nullptr) const;
  Var forward(const Var& pet, const Var& ct, ForwardTrace* trace = nullptr) const;

  const Network& network() const { return *network_; }

  /// Zeroes MSA and MLP weights of every transformer module.
  void zero_transformer_sub_blocks();
  /// Zeroes the final 1x1 classifier of every head.
  void zero_classifiers();

 private:
  Model(ModelConfig config, nn::ParamStore store, std::unique_ptr<Network> network);

  ModelConfig config_;
  nn::ParamStore store_;
  std::unique_ptr<Network> network_;
};

/// Rounds every parameter value to the nearest float32.
void round_to_float32(nn::ParamStore& store);

}  // namespace hct::model
