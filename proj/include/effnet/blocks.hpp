#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "effnet/rng.hpp"
#include "effnet/tensor.hpp"

namespace effnet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

/// Learnable tensor drawn uniformly from +-sqrt(1 / fan_in).
Tensor init_uniform(Shape shape, std::size_t fan_in, CounterRng& rng);

/// Per-channel learnable scale and shift. Stands in for batch normalization
/// so that every sample is processed independently.
struct Stabilizer {
  Tensor scale;
  Tensor shift;

  /// scale = gain, shift = 0.
  static Stabilizer identity(std::size_t channels, double gain = 1.0);
  Tensor forward(const Tensor& x) const;
  Tensor forward_silu(const Tensor& x) const;  // silu(forward(x))
  void collect(const std::string& prefix, ParameterList& out) const;
};

/// Squeeze-and-excitation weights. The excitation MLP has no biases.
struct SEBlock {
  std::size_t channels = 0;
  std::size_t reduced = 0;
  Tensor w1;  // [reduced, channels]
  Tensor w2;  // [channels, reduced]

  static SEBlock create(std::size_t channels, std::size_t reduction, CounterRng& rng);
  void collect(const std::string& prefix, ParameterList& out) const;
};

/// Global average pool per channel: [N,C,H,W] -> [N,C].
Tensor squeeze(const Tensor& u);

/// sigmoid(W2 relu(W1 z)) row-wise: [N,C] -> [N,C], every entry in (0,1).
Tensor excite(const Tensor& z, const SEBlock& se);

/// out[n,c,i,j] = s[n,c] * u[n,c,i,j].
Tensor se_scale(const Tensor& u, const Tensor& s);

/// squeeze -> excite -> se_scale.
Tensor se_forward(const Tensor& u, const SEBlock& se);

struct MBConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t expansion = 1;
  std::size_t kernel = 3;
  int stride = 1;
  bool use_se = true;
  std::size_t se_reduction = 4;

  std::size_t expanded() const { return in_channels * expansion; }
  bool skip() const { return stride == 1 && in_channels == out_channels; }
};

/// Initial stabilizer gain after a convolution whose inputs have second
/// moment `input_moment`: the +-sqrt(1/fan_in) uniform weights shrink the
/// second moment by 3x, the gain restores it to 1.
double init_gain(double input_moment);

/// E[silu(z)^2] for z ~ N(0, 1).
inline constexpr double kSiluSecondMoment = 0.3557755198173523;

/// Extra factor on the projection gain of blocks with a skip connection.
inline constexpr double kResidualBranchGain = 0.25;

/// Inverted bottleneck: 1x1 expand (omitted when expansion == 1), kxk
/// depthwise with the block stride, optional SE on the expanded width, 1x1
/// projection, residual add when `skip()`. Every convolution is bias-free and
/// followed by a Stabilizer; expand and depthwise use SiLU.
struct MBConvBlock {
  MBConvSpec spec;
  Tensor expand_w;  // [E, in, 1, 1], undefined when expansion == 1
  Stabilizer expand_norm;
  Tensor depthwise_w;  // [E, 1, k, k]
  Stabilizer depthwise_norm;
  std::optional<SEBlock> se;
  Tensor project_w;  // [out, E, 1, 1]
  Stabilizer project_norm;

  static MBConvBlock create(const MBConvSpec& spec, CounterRng& rng);
  void collect(const std::string& prefix, ParameterList& out) const;
  std::size_t output_side(std::size_t input_side) const;
};

Tensor mbconv_forward(const Tensor& x, const MBConvBlock& block);

/// Feature-fusion head. Tapped block outputs are optionally SE-weighted by
/// their own SEBlock, every tap and the final map are globally pooled, and the
/// vectors are concatenated in tap order followed by the final features.
struct FusionHead {
  std::vector<std::size_t> tap_indices;
  std::vector<std::size_t> tap_channels;
  std::size_t final_channels = 0;
  std::vector<SEBlock> attention;  // one per tap, or empty

  static FusionHead create(std::vector<std::size_t> tap_indices,
                           std::vector<std::size_t> tap_channels,
                           std::size_t final_channels, bool attention,
                           std::size_t se_reduction, CounterRng& rng);
  std::size_t output_width() const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

Tensor fuse_features(std::span<const Tensor> taps, const Tensor& final_map,
                     const FusionHead& head, bool attention);

}  // namespace effnet
