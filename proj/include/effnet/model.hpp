#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "effnet/blocks.hpp"
#include "effnet/tensor.hpp"

namespace effnet {

struct StageSpec {
  std::size_t blocks = 1;
  std::size_t channels = 16;
  int stride = 1;
  std::size_t expansion = 1;
  std::size_t kernel = 3;

  bool operator==(const StageSpec&) const = default;
};

/// Default stage layout: seven MBConv blocks whose strides, together with a
/// stride-2 stem, reduce the input 32x.
std::vector<StageSpec> default_stages();

/// Ablation switchboard plus the miniature architecture.
struct ModelConfig {
  bool rcc = false;  // consumed by the training pipeline, recorded for provenance
  bool rds = false;  // stem stride 1 instead of 2
  bool ff = false;
  bool attention = false;

  std::size_t stem_channels = 16;
  std::vector<StageSpec> stages = default_stages();
  /// 0-based block indices whose outputs feed the fusion head, in addition
  /// to the final block output.
  std::vector<std::size_t> tap_blocks{0, 2, 4};
  std::size_t se_reduction = 4;
  bool block_se = true;
  std::uint64_t seed = 0;

  /// Throws ConfigError on attention without ff, a stage layout that does not
  /// downsample 32x with the stride-2 stem, or out-of-range taps.
  void validate() const;

  int stem_stride() const { return rds ? 1 : 2; }
  std::size_t block_count() const;
  std::string flags_label() const;
};

/// Total downsampling factor of a configuration (stem stride times every
/// stage stride).
int downsampling_factor(const ModelConfig& cfg);

struct FeatureMaps {
  std::vector<Tensor> taps;
  Tensor final_map;
};

/// Miniature EfficientNet-style binary classifier: stem conv, MBConv blocks,
/// optional fusion head, single-logit dense classifier.
class EffNetMini {
 public:
  explicit EffNetMini(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  /// [N,3,H,W] -> logits [N,1].
  Tensor forward(const Tensor& batch) const;

  /// Backbone outputs: tapped block outputs (empty unless ff) and the final map.
  FeatureMaps features(const Tensor& batch) const;

  const ParameterList& parameters() const { return params_; }
  std::size_t classifier_width() const;
  const std::vector<MBConvBlock>& blocks() const { return blocks_; }
  const std::optional<FusionHead>& fusion_head() const { return head_; }

 private:
  void collect();

  ModelConfig cfg_;
  Tensor stem_w_;
  Stabilizer stem_norm_;
  std::vector<MBConvBlock> blocks_;
  std::optional<FusionHead> head_;
  Tensor classifier_w_;
  Tensor classifier_b_;
  ParameterList params_;
};

/// Validates `cfg` and initializes weights deterministically from cfg.seed.
EffNetMini build_model(const ModelConfig& cfg);

std::size_t count_parameters(const ParameterList& params);
std::size_t count_parameters(const EffNetMini& model);

}  // namespace effnet
