#include "effnet/blocks.hpp"

#include <cmath>

#include "effnet/errors.hpp"
#include "effnet/ops.hpp"

namespace effnet {

Tensor init_uniform(Shape shape, std::size_t fan_in, CounterRng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Stabilizer Stabilizer::identity(std::size_t channels, double gain) {
  return {Tensor::full({channels}, gain, true), Tensor::zeros({channels}, true)};
}

double init_gain(double input_moment) { return std::sqrt(3.0 / input_moment); }

Tensor Stabilizer::forward(const Tensor& x) const {
  return channel_affine(x, scale, shift);
}

Tensor Stabilizer::forward_silu(const Tensor& x) const {
  return channel_affine_silu(x, scale, shift);
}

void Stabilizer::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".scale", scale});
  out.push_back({prefix + ".shift", shift});
}

SEBlock SEBlock::create(std::size_t channels, std::size_t reduction, CounterRng& rng) {
  if (reduction == 0 || channels % reduction != 0 || channels / reduction == 0) {
    throw ConfigError("SE block: channels " + std::to_string(channels) +
                      " not divisible by reduction ratio " + std::to_string(reduction));
  }
  SEBlock se;
  se.channels = channels;
  se.reduced = channels / reduction;
  se.w1 = init_uniform({se.reduced, channels}, channels, rng);
  se.w2 = init_uniform({channels, se.reduced}, se.reduced, rng);
  return se;
}

void SEBlock::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".w1", w1});
  out.push_back({prefix + ".w2", w2});
}

Tensor squeeze(const Tensor& u) {
  if (u.rank() != 4) {
    throw ShapeError("squeeze: expected [N,C,H,W], got " + shape_str(u.shape()));
  }
  return reduce_mean_spatial(u).reshape({u.dim(0), u.dim(1)});
}

Tensor excite(const Tensor& z, const SEBlock& se) {
  if (z.rank() != 2 || z.dim(1) != se.channels) {
    throw ShapeError("excite: squeezed width " + shape_str(z.shape()) +
                     " does not match SE channels " + std::to_string(se.channels));
  }
  return sigmoid(dense(relu(dense(z, se.w1)), se.w2));
}

Tensor se_scale(const Tensor& u, const Tensor& s) {
  if (u.rank() != 4 || s.rank() != 2 || s.dim(1) != u.dim(1)) {
    throw ShapeError("se_scale: channel weights " + shape_str(s.shape()) +
                     " do not match feature maps " + shape_str(u.shape()));
  }
  return channel_scale(u, s);
}

Tensor se_forward(const Tensor& u, const SEBlock& se) {
  return se_scale(u, excite(squeeze(u), se));
}

MBConvBlock MBConvBlock::create(const MBConvSpec& spec, CounterRng& rng) {
  if (spec.in_channels == 0 || spec.out_channels == 0 || spec.expansion == 0) {
    throw ConfigError("MBConv: channel counts and expansion must be positive");
  }
  if (spec.kernel % 2 == 0) throw ConfigError("MBConv: kernel size must be odd");
  if (spec.stride <= 0) throw ConfigError("MBConv: stride must be positive");
  MBConvBlock b;
  b.spec = spec;
  const std::size_t e = spec.expanded();
  if (spec.expansion != 1) {
    b.expand_w = init_uniform({e, spec.in_channels, 1, 1}, spec.in_channels, rng);
    b.expand_norm = Stabilizer::identity(e, init_gain(1.0));
  }
  b.depthwise_w = init_uniform({e, 1, spec.kernel, spec.kernel},
                               spec.kernel * spec.kernel, rng);
  b.depthwise_norm = Stabilizer::identity(e, init_gain(kSiluSecondMoment));
  if (spec.use_se) b.se = SEBlock::create(e, spec.se_reduction, rng);
  b.project_w = init_uniform({spec.out_channels, e, 1, 1}, e, rng);
  // SE weights start near sigmoid(0) = 0.5, a quarter of the second moment.
  const double moment = kSiluSecondMoment * (spec.use_se ? 0.25 : 1.0);
  // Residual branches start damped so the skip path dominates at init.
  const double branch = spec.skip() ? kResidualBranchGain : 1.0;
  b.project_norm = Stabilizer::identity(spec.out_channels, branch * init_gain(moment));
  return b;
}

void MBConvBlock::collect(const std::string& prefix, ParameterList& out) const {
  if (expand_w.defined()) {
    out.push_back({prefix + ".expand.weight", expand_w});
    expand_norm.collect(prefix + ".expand.norm", out);
  }
  out.push_back({prefix + ".depthwise.weight", depthwise_w});
  depthwise_norm.collect(prefix + ".depthwise.norm", out);
  if (se) se->collect(prefix + ".se", out);
  out.push_back({prefix + ".project.weight", project_w});
  project_norm.collect(prefix + ".project.norm", out);
}

std::size_t MBConvBlock::output_side(std::size_t input_side) const {
  return conv_output_size(input_side, spec.kernel, spec.stride,
                          static_cast<int>(spec.kernel / 2));
}

Tensor mbconv_forward(const Tensor& x, const MBConvBlock& block) {
  const auto& s = block.spec;
  if (x.rank() != 4 || x.dim(1) != s.in_channels) {
    throw ShapeError("MBConv: input " + shape_str(x.shape()) + " has channels (dim 1) " +
                     (x.rank() > 1 ? std::to_string(x.dim(1)) : std::string("?")) +
                     ", block expects " + std::to_string(s.in_channels));
  }
  Tensor h = x;
  if (block.expand_w.defined()) {
    h = block.expand_norm.forward_silu(conv2d(h, block.expand_w));
  }
  const int groups = static_cast<int>(s.expanded());
  h = block.depthwise_norm.forward_silu(conv2d(
      h, block.depthwise_w, {s.stride, static_cast<int>(s.kernel / 2), groups}));
  if (block.se) h = se_forward(h, *block.se);
  h = block.project_norm.forward(conv2d(h, block.project_w));
  if (s.skip()) h = add(h, x);
  return h;
}

FusionHead FusionHead::create(std::vector<std::size_t> tap_indices,
                              std::vector<std::size_t> tap_channels,
                              std::size_t final_channels, bool attention,
                              std::size_t se_reduction, CounterRng& rng) {
  if (tap_indices.size() != tap_channels.size()) {
    throw ConfigError("fusion head: tap index and channel lists differ in length");
  }
  FusionHead head;
  head.tap_indices = std::move(tap_indices);
  head.tap_channels = std::move(tap_channels);
  head.final_channels = final_channels;
  if (attention) {
    for (auto c : head.tap_channels) {
      head.attention.push_back(SEBlock::create(c, se_reduction, rng));
    }
  }
  return head;
}

std::size_t FusionHead::output_width() const {
  std::size_t w = final_channels;
  for (auto c : tap_channels) w += c;
  return w;
}

void FusionHead::collect(const std::string& prefix, ParameterList& out) const {
  for (std::size_t i = 0; i < attention.size(); ++i) {
    attention[i].collect(prefix + ".tap" + std::to_string(tap_indices[i]) + ".se", out);
  }
}

Tensor fuse_features(std::span<const Tensor> taps, const Tensor& final_map,
                     const FusionHead& head, bool attention) {
  if (taps.size() != head.tap_indices.size()) {
    throw ConfigError("fuse_features: got " + std::to_string(taps.size()) +
                      " taps, head is configured for " +
                      std::to_string(head.tap_indices.size()));
  }
  if (attention && head.attention.size() != taps.size()) {
    throw ConfigError("fuse_features: attention requested but the head has no SE blocks");
  }
  if (final_map.rank() != 4 || final_map.dim(1) != head.final_channels) {
    throw ShapeError("fuse_features: final map " + shape_str(final_map.shape()) +
                     " does not carry " + std::to_string(head.final_channels) +
                     " channels");
  }
  std::vector<Tensor> parts;
  parts.reserve(taps.size() + 1);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i].rank() != 4 || taps[i].dim(1) != head.tap_channels[i]) {
      throw ShapeError("fuse_features: tap " + std::to_string(i) + " shape " +
                       shape_str(taps[i].shape()) + ", expected " +
                       std::to_string(head.tap_channels[i]) + " channels");
    }
    const Tensor t = attention ? se_forward(taps[i], head.attention[i]) : taps[i];
    parts.push_back(squeeze(t));
  }
  parts.push_back(squeeze(final_map));
  return concat_features(parts);
}

}  // namespace effnet
