#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "effnet/augment.hpp"

namespace effnet {

inline constexpr std::size_t kPatchSide = 96;
/// Rows/cols [kCenterLo, kCenterLo + kCenterSide) of a patch hold the signal.
inline constexpr std::size_t kCenterLo = 32;
inline constexpr std::size_t kCenterSide = 32;

struct Dataset {
  std::vector<ImagePatch> images;  // source_id is the file name
  std::string root;                // directory, or "synthetic"
  std::string manifest_digest;     // hex SHA-256

  std::size_t size() const { return images.size(); }
  std::size_t positives() const;
  std::size_t negatives() const { return size() - positives(); }
  std::vector<int> labels() const;
};

struct SynthSpec {
  std::size_t n = 2000;
  double pos_fraction = 0.405;
  double signal_strength = 32.0;
  std::uint64_t seed = 0;
  /// Standard deviation of the per-pixel speckle, in gray levels.
  double noise_level = 12.0;

  void validate() const;
};

/// Exactly round(n * pos_fraction) positives at seeded positions. Pixels are
/// integers in [0, 255]. The background of image i depends only on
/// (seed, i); positives add oriented stripes inside the center block.
Dataset generate_synthetic(const SynthSpec& spec);

/// Image i of `spec` rendered with the given label, whatever label the
/// generator would assign it. Background pixels do not depend on the label.
ImagePatch render_synthetic(const SynthSpec& spec, std::size_t index, int label);

/// Binary PPM (P6, maxval 255). Pixel values are rounded and clamped.
std::string encode_ppm(const ImagePatch& img);
ImagePatch decode_ppm(std::string_view bytes, const std::string& origin);

/// Writes <dir>/labels.csv and one PPM per image named by source_id.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& root);

/// SHA-256 over (file name, label, file bytes) entries sorted by file name.
struct ManifestEntry {
  std::string filename;
  int label;
  std::string bytes;
};
std::string manifest_digest(std::vector<ManifestEntry> entries);

/// Stratified seeded split: each class is shuffled with its own substream
/// and its first round(fraction * count) members go to train. Both halves
/// keep the original dataset order.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction,
                                          std::uint64_t seed);

}  // namespace effnet
