#include "hct/model.hpp"

#include <algorithm>

#include "hct/errors.hpp"

namespace hct::model {

namespace {

const std::vector<std::pair<std::string, Variant>>& variant_table() {
  static const std::vector<std::pair<std::string, Variant>> table = {
      {"HCT", Variant::HCT},       {"EF-TN", Variant::EF_TN},   {"LF-TN", Variant::LF_TN},
      {"EF-FCN", Variant::EF_FCN}, {"LF-FCN", Variant::LF_FCN}, {"HF-FCN", Variant::HF_FCN},
  };
  return table;
}

}  // namespace

std::string to_string(Variant v) {
  for (const auto& [name, value] : variant_table()) {
    if (value == v) return name;
  }
  return "unknown";
}

std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (const auto& [name, value] : variant_table()) names.push_back(name);
  names.insert(names.begin() + 1, "HF-TN");
  return names;
}

Variant parse_variant(const std::string& name) {
  if (name == "HF-TN") return Variant::HCT;
  for (const auto& [n, value] : variant_table()) {
    if (n == name) return value;
  }
  std::string valid;
  for (const auto& n : variant_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown variant '" + name + "'; valid variants: " + valid);
}

void ModelConfig::validate() const {
  if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0) {
    throw ConfigError("input size " + std::to_string(h) + "x" + std::to_string(w) + " must be divisible by 16");
  }
  if (n_heads == 0 || d_embed % n_heads != 0) {
    throw ConfigError("d_embed " + std::to_string(d_embed) + " must be divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (d_embed < 4 || d_embed % 4 != 0) throw ConfigError("d_embed must be a positive multiple of 4");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (n_classes != 2) throw ConfigError("only 2-class segmentation is supported");
  for (auto width : backbone_widths) {
    if (width == 0) throw ConfigError("backbone widths must be positive");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"h", c.h},
          {"w", c.w},
          {"d_embed", c.d_embed},
          {"depth", c.depth},
          {"n_heads", c.n_heads},
          {"backbone_widths", c.backbone_widths},
          {"n_classes", c.n_classes},
          {"variant", to_string(c.variant)},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  try {
    c.h = j.value("h", c.h);
    c.w = j.value("w", c.w);
    c.d_embed = j.value("d_embed", c.d_embed);
    c.depth = j.value("depth", c.depth);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.backbone_widths = j.value("backbone_widths", c.backbone_widths);
    c.n_classes = j.value("n_classes", c.n_classes);
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

// ---- components --------------------------------------------------------------

Backbone Backbone::create(nn::ParamStore& store, const std::string& prefix, std::size_t in_ch,
                          const std::array<std::size_t, 4>& widths, std::mt19937_64& rng) {
  Backbone b;
  b.stem = nn::Conv2d::create(store, prefix + ".stem", in_ch, widths[0], 3, 2, 1, rng);
  b.stem_norm = nn::GroupNorm::create(store, prefix + ".stem_norm", widths[0]);
  b.stage2 = nn::ResidualBlock::create(store, prefix + ".stage2", widths[0], widths[1], 2, rng);
  b.stage3 = nn::ResidualBlock::create(store, prefix + ".stage3", widths[1], widths[2], 2, rng);
  b.stage4 = nn::ResidualBlock::create(store, prefix + ".stage4", widths[2], widths[3], 2, rng);
  return b;
}

Backbone::Output Backbone::operator()(const Var& image) const {
  const Tensor& x = image.value();
  if (x.rank() != 4 || x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0) {
    throw ConfigError("backbone input " + hct::to_string(x.shape()) + " must be NCHW with H, W divisible by 16");
  }
  Var s1 = nn::gelu(stem_norm(stem(image)));
  Var s2 = stage2(s1);
  Var s4 = stage4(stage3(s2));
  return {s4, s2};
}

EncoderBranch EncoderBranch::create(nn::ParamStore& store, const std::string& prefix, std::size_t in_ch,
                                    const ModelConfig& cfg, std::mt19937_64& rng) {
  EncoderBranch e;
  e.backbone = Backbone::create(store, prefix + ".backbone", in_ch, cfg.backbone_widths, rng);
  e.projection = nn::Conv2d::create(store, prefix + ".projection", cfg.backbone_widths[3], cfg.d_embed, 1, 1, 0, rng);
  e.positional = store.add(prefix + ".positional", nn::trunc_normal({cfg.n_tokens(), cfg.d_embed}, 0.02, rng));
  e.stack = nn::TransformerStack::create(store, prefix + ".encoder", cfg.depth, cfg.d_embed, cfg.n_heads, rng);
  return e;
}

EncoderBranch::Output EncoderBranch::operator()(const Var& image) const {
  auto features = backbone(image);
  Var tokens = nn::flatten_to_tokens(projection(features.deep));
  if (tokens.shape()[1] != positional.shape()[0] || tokens.shape()[2] != positional.shape()[1]) {
    throw DimensionError("positional table " + hct::to_string(positional.shape()) + " does not match " +
                         std::to_string(tokens.shape()[1]) + " tokens of dim " + std::to_string(tokens.shape()[2]));
  }
  Var embedded = nn::add_positional(tokens, positional);
  return {stack(embedded), embedded, features.skip};
}

HyperDecoder HyperDecoder::create(nn::ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                                  std::mt19937_64& rng) {
  HyperDecoder d;
  d.positional = store.add(prefix + ".positional", nn::trunc_normal({3 * cfg.n_tokens(), cfg.d_embed}, 0.02, rng));
  d.stack = nn::TransformerStack::create(store, prefix + ".decoder", cfg.depth, cfg.d_embed, cfg.n_heads, rng);
  return d;
}

Var HyperDecoder::operator()(const Var& pet, const Var& ct, const Var& con, std::vector<Tensor>* attention) const {
  if (pet.shape() != ct.shape() || pet.shape() != con.shape() || pet.value().rank() != 3) {
    throw DimensionError("hyper decoder branches disagree: " + hct::to_string(pet.shape()) + ", " +
                         hct::to_string(ct.shape()) + ", " + hct::to_string(con.shape()));
  }
  const std::size_t n = pet.shape()[1];
  Var joint = nn::add_positional(nn::concat({pet, ct, con}, 1), positional);
  joint = stack(joint, attention);
  return nn::mean_of({nn::slice(joint, 1, 0, n), nn::slice(joint, 1, n, n), nn::slice(joint, 1, 2 * n, n)});
}

SegmentationHead SegmentationHead::create(nn::ParamStore& store, const std::string& prefix, const ModelConfig& cfg,
                                          std::size_t skip_channels, std::mt19937_64& rng) {
  const std::size_t d = cfg.d_embed;
  SegmentationHead hd;
  hd.conv1 = nn::Conv2d::create(store, prefix + ".conv1", d, d / 2, 3, 1, 1, rng);
  hd.conv2 = nn::Conv2d::create(store, prefix + ".conv2", d / 2, d / 4, 3, 1, 1, rng);
  hd.skip_proj = nn::Conv2d::create(store, prefix + ".skip_proj", skip_channels, d / 4, 1, 1, 0, rng);
  hd.classifier = nn::Conv2d::create(store, prefix + ".classifier", d / 4, cfg.n_classes, 1, 1, 0, rng);
  return hd;
}

Var SegmentationHead::operator()(const Var& features, const Var& skip, std::size_t h, std::size_t w) const {
  const Shape& s = skip.shape();
  if (s.size() != 4 || s[2] != h / 4 || s[3] != w / 4) {
    throw DimensionError("skip feature " + hct::to_string(s) + " must have spatial dims (" + std::to_string(h / 4) +
                         ", " + std::to_string(w / 4) + ")");
  }
  Var x = nn::gelu(conv2(nn::gelu(conv1(features))));
  x = nn::add(nn::bilinear_resize(x, h / 4, w / 4), skip_proj(skip));
  return nn::channel_softmax(classifier(nn::bilinear_resize(x, h, w)));
}

Var SegmentationHead::from_tokens(const Var& tokens, const Var& skip, std::size_t h, std::size_t w) const {
  if (tokens.shape().size() != 3 || tokens.shape()[1] != (h / 16) * (w / 16)) {
    throw DimensionError("segmentation head expects " + std::to_string((h / 16) * (w / 16)) + " tokens, got " +
                         hct::to_string(tokens.shape()));
  }
  return (*this)(nn::tokens_to_map(tokens, h / 16, w / 16), skip, h, w);
}

// ---- networks ------------------------------------------------------------------

namespace {

Var channel_concat(const Var& pet, const Var& ct) { return nn::concat({pet, ct}, 1); }

void record(ForwardTrace* trace, const Var& tokens) {
  if (trace) trace->branch_tokens.push_back(tokens.value());
}

class HctNetwork final : public Network {
 public:
  HctNetwork(nn::ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg),
        pet_(EncoderBranch::create(store, "pet", 1, cfg, rng)),
        ct_(EncoderBranch::create(store, "ct", 1, cfg, rng)),
        con_(EncoderBranch::create(store, "con", 2, cfg, rng)),
        decoder_(HyperDecoder::create(store, "fusion", cfg, rng)),
        head_(SegmentationHead::create(store, "head", cfg, cfg.backbone_widths[1], rng)) {}

  Var forward(const Var& pet, const Var& ct, ForwardTrace* trace) const override {
    auto e_pet = pet_(pet);
    auto e_ct = ct_(ct);
    auto e_con = con_(channel_concat(pet, ct));
    record(trace, e_pet.tokens);
    record(trace, e_ct.tokens);
    record(trace, e_con.tokens);
    Var fused = decoder_(e_pet.tokens, e_ct.tokens, e_con.tokens, trace ? &trace->decoder_attention : nullptr);
    if (trace) {
      trace->decoder_tokens = 3 * e_pet.tokens.shape()[1];
      trace->decoder_output = fused.value();
    }
    return head_.from_tokens(fused, e_con.skip, cfg_.h, cfg_.w);
  }

  std::vector<const nn::TransformerModule*> transformer_modules() const override {
    std::vector<const nn::TransformerModule*> out;
    for (const auto* stack : {&pet_.stack, &ct_.stack, &con_.stack, &decoder_.stack})
      for (const auto& layer : stack->layers) out.push_back(&layer);
    return out;
  }
  std::vector<const SegmentationHead*> heads() const override { return {&head_}; }

 private:
  ModelConfig cfg_;
  EncoderBranch pet_, ct_, con_;
  HyperDecoder decoder_;
  SegmentationHead head_;
};

// Encoder branch + a second depth-T transformer stack + head.
class TnPipeline {
 public:
  TnPipeline(nn::ParamStore& store, const std::string& prefix, std::size_t in_ch, const ModelConfig& cfg,
             std::mt19937_64& rng)
      : cfg_(cfg),
        branch_(EncoderBranch::create(store, prefix, in_ch, cfg, rng)),
        stack_(nn::TransformerStack::create(store, prefix + ".decoder", cfg.depth, cfg.d_embed, cfg.n_heads, rng)),
        head_(SegmentationHead::create(store, prefix + ".head", cfg, cfg.backbone_widths[1], rng)) {}

  Var operator()(const Var& image, ForwardTrace* trace) const {
    auto e = branch_(image);
    record(trace, e.tokens);
    return head_.from_tokens(stack_(e.tokens), e.skip, cfg_.h, cfg_.w);
  }

  void collect(std::vector<const nn::TransformerModule*>& out) const {
    for (const auto* stack : {&branch_.stack, &stack_})
      for (const auto& layer : stack->layers) out.push_back(&layer);
  }
  const SegmentationHead& head() const { return head_; }

 private:
  ModelConfig cfg_;
  EncoderBranch branch_;
  nn::TransformerStack stack_;
  SegmentationHead head_;
};

// Backbone + projection to D + two residual blocks at /16 + head.
class FcnPipeline {
 public:
  FcnPipeline(nn::ParamStore& store, const std::string& prefix, std::size_t in_ch, const ModelConfig& cfg,
              std::mt19937_64& rng)
      : cfg_(cfg),
        backbone_(Backbone::create(store, prefix + ".backbone", in_ch, cfg.backbone_widths, rng)),
        projection_(nn::Conv2d::create(store, prefix + ".projection", cfg.backbone_widths[3], cfg.d_embed, 1, 1, 0,
                                       rng)),
        block1_(nn::ResidualBlock::create(store, prefix + ".fuse1", cfg.d_embed, cfg.d_embed, 1, rng)),
        block2_(nn::ResidualBlock::create(store, prefix + ".fuse2", cfg.d_embed, cfg.d_embed, 1, rng)),
        head_(SegmentationHead::create(store, prefix + ".head", cfg, cfg.backbone_widths[1], rng)) {}

  Var operator()(const Var& image) const {
    auto f = backbone_(image);
    return head_(block2_(block1_(projection_(f.deep))), f.skip, cfg_.h, cfg_.w);
  }
  const SegmentationHead& head() const { return head_; }

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  nn::Conv2d projection_;
  nn::ResidualBlock block1_, block2_;
  SegmentationHead head_;
};

class EarlyFusionTn final : public Network {
 public:
  EarlyFusionTn(nn::ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng)
      : pipeline_(store, "con", 2, cfg, rng) {}
  Var forward(const Var& pet, const Var& ct, ForwardTrace* trace) const override {
    return pipeline_(channel_concat(pet, ct), trace);
  }
  std::vector<const nn::TransformerModule*> transformer_modules() const override {
    std::vector<const nn::TransformerModule*> out;
    pipeline_.collect(out);
    return out;
  }
  std::vector<const SegmentationHead*> heads() const override { return {&pipeline_.head()}; }

 private:
  TnPipeline pipeline_;
};

class LateFusionTn final : public Network {
 public:
  LateFusionTn(nn::ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng)
      : pet_(store, "pet", 1, cfg, rng), ct_(store, "ct", 1, cfg, rng) {}
  Var forward(const Var& pet, const Var& ct, ForwardTrace* trace) const override {
    return nn::mean_of({pet_(pet, trace), ct_(ct, trace)});
  }
  std::vector<const nn::TransformerModule*> transformer_modules() const override {
    std::vector<const nn::TransformerModule*> out;
    pet_.collect(out);
    ct_.collect(out);
    return out;
  }
  std::vector<const SegmentationHead*> heads() const override { return {&pet_.head(), &ct_.head()}; }

 private:
  TnPipeline pet_, ct_;
};

class EarlyFusionFcn final : public Network {
 public:
  EarlyFusionFcn(nn::ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng)
      : pipeline_(store, "con", 2, cfg, rng) {}
  Var forward(const Var& pet, const Var& ct, ForwardTrace*) const override {
    return pipeline_(channel_concat(pet, ct));
  }
  std::vector<const nn::TransformerModule*> transformer_modules() const override { return {}; }
  std::vector<const SegmentationHead*> heads() const override { return {&pipeline_.head()}; }

 private:
  FcnPipeline pipeline_;
};

class LateFusionFcn final : public Network {
 public:
  LateFusionFcn(nn::ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng)
      : pet_(store, "pet", 1, cfg, rng), ct_(store, "ct", 1, cfg, rng) {}
  Var forward(const Var& pet, const Var& ct, ForwardTrace*) const override {
    return nn::mean_of({pet_(pet), ct_(ct)});
  }
  std::vector<const nn::TransformerModule*> transformer_modules() const override { return {}; }
  std::vector<const SegmentationHead*> heads() const override { return {&pet_.head(), &ct_.head()}; }

 private:
  FcnPipeline pet_, ct_;
};

// Three convolutional branches fused by channel concatenation at /16.
class HyperFusionFcn final : public Network {
 public:
  HyperFusionFcn(nn::ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    const char* names[3] = {"pet", "ct", "con"};
    const std::size_t channels[3] = {1, 1, 2};
    for (int i = 0; i < 3; ++i) {
      const std::string prefix = names[i];
      backbones_.push_back(Backbone::create(store, prefix + ".backbone", channels[i], cfg.backbone_widths, rng));
      projections_.push_back(
          nn::Conv2d::create(store, prefix + ".projection", cfg.backbone_widths[3], cfg.d_embed, 1, 1, 0, rng));
    }
    block1_ = nn::ResidualBlock::create(store, "fusion.fuse1", 3 * cfg.d_embed, cfg.d_embed, 1, rng);
    block2_ = nn::ResidualBlock::create(store, "fusion.fuse2", cfg.d_embed, cfg.d_embed, 1, rng);
    head_ = SegmentationHead::create(store, "head", cfg, cfg.backbone_widths[1], rng);
  }

  Var forward(const Var& pet, const Var& ct, ForwardTrace*) const override {
    auto f_pet = backbones_[0](pet);
    auto f_ct = backbones_[1](ct);
    auto f_con = backbones_[2](channel_concat(pet, ct));
    Var joint = nn::concat(
        {projections_[0](f_pet.deep), projections_[1](f_ct.deep), projections_[2](f_con.deep)}, 1);
    return head_(block2_(block1_(joint)), f_con.skip, cfg_.h, cfg_.w);
  }
  std::vector<const nn::TransformerModule*> transformer_modules() const override { return {}; }
  std::vector<const SegmentationHead*> heads() const override { return {&head_}; }

 private:
  ModelConfig cfg_;
  std::vector<Backbone> backbones_;
  std::vector<nn::Conv2d> projections_;
  nn::ResidualBlock block1_, block2_;
  SegmentationHead head_;
};

}  // namespace

// ---- model -------------------------------------------------------------------

Model::Model(ModelConfig config, nn::ParamStore store, std::unique_ptr<Network> network)
    : config_(std::move(config)), store_(std::move(store)), network_(std::move(network)) {}

Model Model::build(const ModelConfig& config) {
  config.validate();
  nn::ParamStore store;
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32), 0x4843u};
  std::mt19937_64 rng(seq);
  std::unique_ptr<Network> net;
  switch (config.variant) {
    case Variant::HCT: net = std::make_unique<HctNetwork>(store, config, rng); break;
    case Variant::EF_TN: net = std::make_unique<EarlyFusionTn>(store, config, rng); break;
    case Variant::LF_TN: net = std::make_unique<LateFusionTn>(store, config, rng); break;
    case Variant::EF_FCN: net = std::make_unique<EarlyFusionFcn>(store, config, rng); break;
    case Variant::LF_FCN: net = std::make_unique<LateFusionFcn>(store, config, rng); break;
    case Variant::HF_FCN: net = std::make_unique<HyperFusionFcn>(store, config, rng); break;
  }
  if (!net) throw ConfigError("unsupported variant");
  round_to_float32(store);
  return Model(config, std::move(store), std::move(net));
}

Var Model::forward(const Tensor& pet, const Tensor& ct, ForwardTrace* trace) const {
  return forward(Var::constant(pet), Var::constant(ct), trace);
}

Var Model::forward(const Var& pet, const Var& ct, ForwardTrace* trace) const {
  const Shape expected{pet.shape().empty() ? 0 : pet.shape()[0], 1, config_.h, config_.w};
  if (pet.shape() != expected || ct.shape() != expected) {
    throw DimensionError("model expects PET and CT of shape (B, 1, " + std::to_string(config_.h) + ", " +
                         std::to_string(config_.w) + "), got " + hct::to_string(pet.shape()) + " and " +
                         hct::to_string(ct.shape()));
  }
  return network_->forward(pet, ct, trace);
}

void Model::zero_transformer_sub_blocks() {
  for (const auto* layer : network_->transformer_modules()) layer->zero_sub_blocks();
}

void Model::zero_classifiers() {
  for (const auto* head : network_->heads()) {
    nn::zero_parameter(head->classifier.weight);
    nn::zero_parameter(head->classifier.bias);
  }
}

void round_to_float32(nn::ParamStore& store) {
  for (auto& [name, var] : store.entries()) {
    Var handle = var;
    for (auto& v : handle.mutable_value().values()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace hct::model
