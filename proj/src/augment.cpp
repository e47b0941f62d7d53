#include "effnet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>

#include "effnet/errors.hpp"

namespace effnet {

namespace {

void validate_axis(const AugmentConfig& cfg, std::size_t side, const char* axis) {
  const std::size_t canvas = side + 2 * cfg.pad;
  if (cfg.crop == 0) throw ConfigError("augment: crop size must be positive");
  if (cfg.crop > canvas) {
    throw ConfigError("augment: crop " + std::to_string(cfg.crop) +
                      " exceeds padded " + axis + " " + std::to_string(canvas));
  }
  if (cfg.center > side) {
    throw ConfigError("augment: center block " + std::to_string(cfg.center) +
                      " larger than image " + axis + " " + std::to_string(side));
  }
  // The center block sits at pad + c0 - d on the output for offset d in
  // [0, canvas - crop]; it must stay inside [0, crop) at both extremes.
  const std::size_t c0 = (side - cfg.center) / 2;
  const std::size_t need = std::max(side + cfg.pad - c0, cfg.pad + c0 + cfg.center);
  if (cfg.crop < need) {
    throw ConfigError("augment: crop " + std::to_string(cfg.crop) + " with pad " +
                      std::to_string(cfg.pad) + " can cut the center block on the " +
                      axis + " axis (need crop >= " + std::to_string(need) + ")");
  }
}

// Mirror index into [0, n) without repeating the edge (numpy "reflect").
long reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError(std::string("augment: ") + name + " = " + std::to_string(p) +
                      " outside [0, 1]");
  }
}

}  // namespace

ImagePatch ImagePatch::blank(std::size_t height, std::size_t width, int label,
                             std::string source_id) {
  ImagePatch p;
  p.height = height;
  p.width = width;
  p.pixels.assign(height * width * kChannels, 0.0f);
  p.label = label;
  p.source_id = std::move(source_id);
  return p;
}

void AugmentConfig::validate(std::size_t side) const {
  validate_axis(*this, side, "height");
  check_prob(h_flip_prob, "h_flip_prob");
  check_prob(v_flip_prob, "v_flip_prob");
  for (double s : channel_std) {
    if (!(s > 0.0)) throw ConfigError("augment: channel std must be positive");
  }
}

ImagePatch crop_padded(const ImagePatch& img, const AugmentConfig& cfg,
                       CropOffsets offsets) {
  validate_axis(cfg, img.height, "height");
  validate_axis(cfg, img.width, "width");
  const std::size_t max_row = img.height + 2 * cfg.pad - cfg.crop;
  const std::size_t max_col = img.width + 2 * cfg.pad - cfg.crop;
  if (offsets.row > max_row || offsets.col > max_col) {
    throw ConfigError("augment: crop offsets (" + std::to_string(offsets.row) + "," +
                      std::to_string(offsets.col) + ") outside [0," +
                      std::to_string(max_row) + "]x[0," + std::to_string(max_col) + "]");
  }
  ImagePatch out = ImagePatch::blank(cfg.crop, cfg.crop, img.label, img.source_id);
  const long pad = static_cast<long>(cfg.pad);
  const long h = static_cast<long>(img.height);
  const long w = static_cast<long>(img.width);
  for (std::size_t r = 0; r < cfg.crop; ++r) {
    const long sr = static_cast<long>(r + offsets.row) - pad;
    for (std::size_t c = 0; c < cfg.crop; ++c) {
      const long sc = static_cast<long>(c + offsets.col) - pad;
      const bool inside = sr >= 0 && sr < h && sc >= 0 && sc < w;
      for (std::size_t ch = 0; ch < ImagePatch::kChannels; ++ch) {
        float v;
        if (inside) {
          v = img.at(sr, sc, ch);
        } else if (cfg.fill == PadFill::reflect) {
          v = img.at(reflect_index(sr, h), reflect_index(sc, w), ch);
        } else {
          v = cfg.fill_value;
        }
        out.at(r, c, ch) = v;
      }
    }
  }
  return out;
}

ImagePatch random_center_crop(const ImagePatch& img, const AugmentConfig& cfg,
                              CounterRng& rng, CropOffsets* drawn) {
  validate_axis(cfg, img.height, "height");
  validate_axis(cfg, img.width, "width");
  CropOffsets off;
  off.row = static_cast<std::size_t>(
      rng.integer(0, static_cast<std::int64_t>(img.height + 2 * cfg.pad - cfg.crop)));
  off.col = static_cast<std::size_t>(
      rng.integer(0, static_cast<std::int64_t>(img.width + 2 * cfg.pad - cfg.crop)));
  if (drawn) *drawn = off;
  return crop_padded(img, cfg, off);
}

ImagePatch flip_horizontal(const ImagePatch& img) {
  ImagePatch out = img;
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      for (std::size_t ch = 0; ch < ImagePatch::kChannels; ++ch) {
        out.at(r, c, ch) = img.at(r, img.width - 1 - c, ch);
      }
    }
  }
  return out;
}

ImagePatch flip_vertical(const ImagePatch& img) {
  ImagePatch out = img;
  const std::size_t row_len = img.width * ImagePatch::kChannels;
  for (std::size_t r = 0; r < img.height; ++r) {
    std::copy_n(img.pixels.begin() + (img.height - 1 - r) * row_len, row_len,
                out.pixels.begin() + r * row_len);
  }
  return out;
}

ImagePatch random_flip(const ImagePatch& img, double h_prob, double v_prob,
                       CounterRng& rng) {
  check_prob(h_prob, "h_flip_prob");
  check_prob(v_prob, "v_flip_prob");
  const bool h = rng.bernoulli(h_prob);
  const bool v = rng.bernoulli(v_prob);
  if (!h && !v) return img;
  ImagePatch out = h ? flip_horizontal(img) : img;
  return v ? flip_vertical(out) : out;
}

void normalize_into(const ImagePatch& img, const std::array<double, 3>& mean,
                    const std::array<double, 3>& std, std::span<double> out) {
  for (double s : std) {
    if (!(s > 0.0)) throw ConfigError("normalize: channel std must be positive");
  }
  const std::size_t plane = img.height * img.width;
  if (out.size() != plane * ImagePatch::kChannels) {
    throw ShapeError("normalize: output buffer holds " + std::to_string(out.size()) +
                     " values, need " + std::to_string(plane * ImagePatch::kChannels));
  }
  for (std::size_t ch = 0; ch < ImagePatch::kChannels; ++ch) {
    double* dst = out.data() + ch * plane;
    const double m = mean[ch], s = std[ch];
    for (std::size_t i = 0; i < plane; ++i) {
      dst[i] = (static_cast<double>(img.pixels[i * ImagePatch::kChannels + ch]) - m) / s;
    }
  }
}

Tensor normalize(const ImagePatch& img, const std::array<double, 3>& mean,
                 const std::array<double, 3>& std) {
  std::vector<double> out(img.height * img.width * ImagePatch::kChannels);
  normalize_into(img, mean, std, out);
  return Tensor::from({ImagePatch::kChannels, img.height, img.width}, std::move(out));
}

ChannelStats channel_stats(std::span<const ImagePatch> images) {
  std::size_t count = 0;
  for (const auto& img : images) count += img.height * img.width;
  if (images.empty() || count == 0) {
    throw UsageError("channel_stats: empty dataset");
  }
  if (count < 2) throw UsageError("channel_stats: need at least 2 pixels");
  ChannelStats st;
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      sum[i % ImagePatch::kChannels] += img.pixels[i];
    }
  }
  for (std::size_t ch = 0; ch < 3; ++ch) st.mean[ch] = sum[ch] / static_cast<double>(count);
  std::array<double, 3> sq{0.0, 0.0, 0.0};
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const double d = img.pixels[i] - st.mean[i % ImagePatch::kChannels];
      sq[i % ImagePatch::kChannels] += d * d;
    }
  }
  for (std::size_t ch = 0; ch < 3; ++ch) {
    st.std[ch] = std::sqrt(sq[ch] / static_cast<double>(count));
    if (st.std[ch] < 1e-6) {
      std::cerr << "warning: channel " << ch << " has zero variance; std clamped to 1e-6\n";
      st.std[ch] = 1e-6;
    }
  }
  return st;
}

ImagePatch augment_training(const ImagePatch& img, const AugmentConfig& cfg, bool rcc,
                            CounterRng& rng) {
  if (rcc) {
    return random_flip(random_center_crop(img, cfg, rng), cfg.h_flip_prob,
                       cfg.v_flip_prob, rng);
  }
  return random_flip(img, cfg.h_flip_prob, cfg.v_flip_prob, rng);
}

CounterRng augmentation_stream(std::uint64_t seed, std::uint64_t epoch,
                               std::uint64_t image_index) {
  return CounterRng(seed).split(0xA5A5'0000'0000'0000ULL ^ epoch).split(image_index);
}

}  // namespace effnet
