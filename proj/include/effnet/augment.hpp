#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "effnet/rng.hpp"
#include "effnet/tensor.hpp"

namespace effnet {

/// H x W x 3 pixel block, row-major with interleaved channels, values in
/// [0, 255] before normalization.
struct ImagePatch {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  int label = 0;
  std::string source_id;

  static constexpr std::size_t kChannels = 3;

  static ImagePatch blank(std::size_t height, std::size_t width, int label = 0,
                          std::string source_id = {});

  float& at(std::size_t row, std::size_t col, std::size_t ch) {
    return pixels[(row * width + col) * kChannels + ch];
  }
  float at(std::size_t row, std::size_t col, std::size_t ch) const {
    return pixels[(row * width + col) * kChannels + ch];
  }
};

enum class PadFill { constant, reflect };

struct AugmentConfig {
  std::size_t pad = 8;
  std::size_t crop = 96;
  /// Side of the diagnostic center block that cropping must keep intact.
  std::size_t center = 32;
  PadFill fill = PadFill::constant;
  float fill_value = 0.0f;
  double h_flip_prob = 0.5;
  double v_flip_prob = 0.5;
  std::array<double, 3> channel_mean{0.0, 0.0, 0.0};
  std::array<double, 3> channel_std{1.0, 1.0, 1.0};
  std::uint64_t seed = 0;

  /// Throws ConfigError unless the crop fits the padded canvas and retains
  /// the center block for every draw on a square input of this side.
  void validate(std::size_t side) const;
};

struct CropOffsets {
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Pads by cfg.pad on all four sides, then cuts a crop x crop window whose
/// top-left corner on the padded canvas is `offsets`.
ImagePatch crop_padded(const ImagePatch& img, const AugmentConfig& cfg,
                       CropOffsets offsets);

/// Random Center Cropping: offsets uniform over [0, side + 2*pad - crop] per
/// axis (row first, then column), then `crop_padded`. With the default
/// 96/8/96 geometry the original center block lands at (40 - dr, 40 - dc).
ImagePatch random_center_crop(const ImagePatch& img, const AugmentConfig& cfg,
                              CounterRng& rng, CropOffsets* drawn = nullptr);

ImagePatch flip_horizontal(const ImagePatch& img);
ImagePatch flip_vertical(const ImagePatch& img);

/// Draws the horizontal decision, then the vertical one, each independently.
ImagePatch random_flip(const ImagePatch& img, double h_prob, double v_prob,
                       CounterRng& rng);

/// (pixel - mean[c]) / std[c], transposed to channel-first [3,H,W].
Tensor normalize(const ImagePatch& img, const std::array<double, 3>& mean,
                 const std::array<double, 3>& std);

/// Same arithmetic as `normalize`, written into a 3*H*W buffer.
void normalize_into(const ImagePatch& img, const std::array<double, 3>& mean,
                    const std::array<double, 3>& std, std::span<double> out);

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

/// Population mean and standard deviation per channel over every pixel of
/// every image (two passes). Zero-variance channels are clamped to 1e-6.
ChannelStats channel_stats(std::span<const ImagePatch> images);

/// Training-time pipeline for one image: optional random center crop, then
/// random flips. The caller supplies the image's own substream.
ImagePatch augment_training(const ImagePatch& img, const AugmentConfig& cfg,
                            bool rcc, CounterRng& rng);

/// Substream for (epoch, image index) under a run seed.
CounterRng augmentation_stream(std::uint64_t seed, std::uint64_t epoch,
                               std::uint64_t image_index);

}  // namespace effnet
