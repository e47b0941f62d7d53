#include "effnet/model.hpp"

#include "effnet/errors.hpp"
#include "effnet/ops.hpp"

namespace effnet {

namespace {

// Substream ids for weight initialization. Each component draws from its own
// stream so toggling ff/attention leaves the backbone initialization intact.
constexpr std::uint64_t kStemStream = 0;
constexpr std::uint64_t kBlockStreamBase = 1;
constexpr std::uint64_t kHeadStream = 1000;
constexpr std::uint64_t kClassifierStream = 2000;

}  // namespace

std::vector<StageSpec> default_stages() {
  return {
      {1, 16, 2, 1, 3},
      {2, 24, 2, 6, 3},
      {2, 40, 2, 6, 5},
      {2, 80, 2, 6, 3},
  };
}

std::size_t ModelConfig::block_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.blocks;
  return n;
}

std::string ModelConfig::flags_label() const {
  std::string s;
  auto add = [&s](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += name;
  };
  add(rcc, "RCC");
  add(rds, "RDS");
  add(ff, "FF");
  add(attention, "Attention");
  return s.empty() ? "baseline" : s;
}

void ModelConfig::validate() const {
  if (attention && !ff) {
    throw ConfigError(
        "attention without feature fusion is not supported: the attention "
        "mechanism weights the fused tap features, so enable ff as well");
  }
  if (stages.empty()) throw ConfigError("model: at least one stage is required");
  if (stem_channels == 0) throw ConfigError("model: stem channels must be positive");
  int product = 2;  // stem stride without rds
  for (const auto& s : stages) {
    if (s.blocks == 0 || s.channels == 0 || s.expansion == 0 || s.stride <= 0) {
      throw ConfigError("model: stage entries must be positive");
    }
    if (s.kernel % 2 == 0) throw ConfigError("model: kernel sizes must be odd");
    product *= s.stride;
  }
  if (product != 32) {
    throw ConfigError("model: stem and stage strides multiply to " +
                      std::to_string(product) + ", expected 32");
  }
  const std::size_t n = block_count();
  for (std::size_t i = 0; i < tap_blocks.size(); ++i) {
    if (tap_blocks[i] + 1 >= n) {
      throw ConfigError("model: tap block " + std::to_string(tap_blocks[i]) +
                        " must precede the final block (" + std::to_string(n) +
                        " blocks)");
    }
    if (i > 0 && tap_blocks[i] <= tap_blocks[i - 1]) {
      throw ConfigError("model: tap blocks must be strictly increasing");
    }
  }
  if (se_reduction == 0) throw ConfigError("model: SE reduction must be positive");
}

int downsampling_factor(const ModelConfig& cfg) {
  int f = cfg.stem_stride();
  for (const auto& s : cfg.stages) f *= s.stride;
  return f;
}

EffNetMini::EffNetMini(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const CounterRng root(cfg_.seed);

  CounterRng stem_rng = root.split(kStemStream);
  stem_w_ = init_uniform({cfg_.stem_channels, 3, 3, 3}, 27, stem_rng);
  stem_norm_ = Stabilizer::identity(cfg_.stem_channels, init_gain(1.0));

  std::size_t in = cfg_.stem_channels;
  std::uint64_t index = 0;
  for (const auto& stage : cfg_.stages) {
    for (std::size_t b = 0; b < stage.blocks; ++b, ++index) {
      MBConvSpec spec;
      spec.in_channels = in;
      spec.out_channels = stage.channels;
      spec.expansion = stage.expansion;
      spec.kernel = stage.kernel;
      spec.stride = b == 0 ? stage.stride : 1;
      spec.use_se = cfg_.block_se;
      spec.se_reduction = cfg_.se_reduction;
      CounterRng block_rng = root.split(kBlockStreamBase + index);
      blocks_.push_back(MBConvBlock::create(spec, block_rng));
      in = stage.channels;
    }
  }

  if (cfg_.ff) {
    std::vector<std::size_t> channels;
    for (auto t : cfg_.tap_blocks) channels.push_back(blocks_[t].spec.out_channels);
    CounterRng head_rng = root.split(kHeadStream);
    head_ = FusionHead::create(cfg_.tap_blocks, std::move(channels), in, cfg_.attention,
                               cfg_.se_reduction, head_rng);
  }

  const std::size_t width = classifier_width();
  CounterRng cls_rng = root.split(kClassifierStream);
  classifier_w_ = init_uniform({1, width}, width, cls_rng);
  classifier_b_ = init_uniform({1}, width, cls_rng);
  collect();
}

std::size_t EffNetMini::classifier_width() const {
  return head_ ? head_->output_width() : blocks_.back().spec.out_channels;
}

void EffNetMini::collect() {
  params_.clear();
  params_.push_back({"stem.weight", stem_w_});
  stem_norm_.collect("stem.norm", params_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect("block" + std::to_string(i), params_);
  }
  if (head_) head_->collect("fusion", params_);
  params_.push_back({"classifier.weight", classifier_w_});
  params_.push_back({"classifier.bias", classifier_b_});
}

FeatureMaps EffNetMini::features(const Tensor& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != 3) {
    throw ShapeError("model: input must be [N,3,H,W], got " + shape_str(batch.shape()));
  }
  FeatureMaps fm;
  Tensor h = stem_norm_.forward_silu(conv2d(batch, stem_w_, {cfg_.stem_stride(), 1, 1}));
  std::size_t next_tap = 0;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = mbconv_forward(h, blocks_[i]);
    if (cfg_.ff && next_tap < cfg_.tap_blocks.size() && cfg_.tap_blocks[next_tap] == i) {
      fm.taps.push_back(h);
      ++next_tap;
    }
  }
  fm.final_map = h;
  return fm;
}

Tensor EffNetMini::forward(const Tensor& batch) const {
  FeatureMaps fm = features(batch);
  Tensor pooled = head_ ? fuse_features(fm.taps, fm.final_map, *head_, cfg_.attention)
                        : squeeze(fm.final_map);
  return dense(pooled, classifier_w_, classifier_b_);
}

EffNetMini build_model(const ModelConfig& cfg) { return EffNetMini(cfg); }

std::size_t count_parameters(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

std::size_t count_parameters(const EffNetMini& model) {
  return count_parameters(model.parameters());
}

}  // namespace effnet
