#include "effnet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "effnet/digest.hpp"
#include "effnet/errors.hpp"
#include "effnet/rng.hpp"

namespace effnet {

namespace fs = std::filesystem;

namespace {

// Substreams of the generator seed.
constexpr std::uint64_t kBackgroundStream = 1;
constexpr std::uint64_t kSignalStream = 2;
constexpr std::uint64_t kLabelStream = 3;

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::string read_file(const fs::path& path, const std::string& what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(what + ": cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.close();
  if (!f) throw Error("cannot write " + path.string());
}

std::string synthetic_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05zu.ppm", index);
  return buf;
}

}  // namespace

std::size_t Dataset::positives() const {
  std::size_t n = 0;
  for (const auto& img : images) n += img.label == 1;
  return n;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(img.label);
  return out;
}

void SynthSpec::validate() const {
  if (n < 2) throw ConfigError("synthetic: n must be at least 2, got " + std::to_string(n));
  if (!(pos_fraction > 0.0 && pos_fraction < 1.0)) {
    throw ConfigError("synthetic: pos_fraction must lie in (0, 1), got " +
                      std::to_string(pos_fraction));
  }
  if (!(signal_strength >= 0.0) || !std::isfinite(signal_strength)) {
    throw ConfigError("synthetic: signal_strength must be a finite value >= 0");
  }
  if (!(noise_level >= 0.0) || !std::isfinite(noise_level)) {
    throw ConfigError("synthetic: noise_level must be a finite value >= 0");
  }
  const auto pos = static_cast<std::size_t>(std::llround(pos_fraction * static_cast<double>(n)));
  if (pos == 0 || pos == n) {
    throw ConfigError("synthetic: n=" + std::to_string(n) + " with pos_fraction " +
                      std::to_string(pos_fraction) + " leaves one class empty");
  }
}

ImagePatch render_synthetic(const SynthSpec& spec, std::size_t index, int label) {
  const std::size_t side = kPatchSide;
  ImagePatch img = ImagePatch::blank(side, side, label, synthetic_name(index));
  const CounterRng root(spec.seed);
  CounterRng bg = root.split(kBackgroundStream).split(index);

  // Background: stained base colour, a few slow waves, per-pixel speckle.
  const double base[3] = {175.0 + 25.0 * bg.uniform(-1, 1), 115.0 + 25.0 * bg.uniform(-1, 1),
                          170.0 + 25.0 * bg.uniform(-1, 1)};
  struct Wave {
    double amp, kx, ky, phase, w[3];
  };
  Wave waves[4];
  for (auto& wv : waves) {
    wv.amp = bg.uniform(6.0, 14.0);
    const double period = bg.uniform(24.0, 96.0), angle = bg.uniform(0.0, kTwoPi);
    wv.kx = kTwoPi / period * std::cos(angle);
    wv.ky = kTwoPi / period * std::sin(angle);
    wv.phase = bg.uniform(0.0, kTwoPi);
    for (double& c : wv.w) c = bg.uniform(0.6, 1.0);
  }
  std::vector<double> value(side * side * 3);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      double* px = value.data() + (r * side + c) * 3;
      for (int ch = 0; ch < 3; ++ch) px[ch] = base[ch];
      for (const auto& wv : waves) {
        const double s = wv.amp * std::cos(wv.kx * c + wv.ky * r + wv.phase);
        for (int ch = 0; ch < 3; ++ch) px[ch] += s * wv.w[ch];
      }
      for (int ch = 0; ch < 3; ++ch) px[ch] += spec.noise_level * bg.normal();
    }
  }

  if (label == 1 && spec.signal_strength > 0.0) {
    // Dark oriented stripes, nuclei-like, strictly inside the center block.
    CounterRng sg = root.split(kSignalStream).split(index);
    const double angle = sg.uniform(0.0, std::numbers::pi);
    const double period = sg.uniform(4.0, 8.0);
    const double phase = sg.uniform(0.0, kTwoPi);
    const double kx = kTwoPi / period * std::cos(angle), ky = kTwoPi / period * std::sin(angle);
    const double w[3] = {0.8, 1.0, 0.5};
    for (std::size_t r = kCenterLo; r < kCenterLo + kCenterSide; ++r) {
      for (std::size_t c = kCenterLo; c < kCenterLo + kCenterSide; ++c) {
        const double p = 0.5 + 0.5 * std::cos(kx * c + ky * r + phase);
        double* px = value.data() + (r * side + c) * 3;
        for (int ch = 0; ch < 3; ++ch) px[ch] -= spec.signal_strength * p * w[ch];
      }
    }
  }
  for (std::size_t i = 0; i < value.size(); ++i) {
    img.pixels[i] = static_cast<float>(std::clamp(std::round(value[i]), 0.0, 255.0));
  }
  return img;
}

Dataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const std::size_t pos =
      static_cast<std::size_t>(std::llround(spec.pos_fraction * static_cast<double>(spec.n)));
  std::vector<std::size_t> order(spec.n);
  std::iota(order.begin(), order.end(), 0);
  CounterRng lr = CounterRng(spec.seed).split(kLabelStream);
  for (std::size_t i = spec.n - 1; i > 0; --i) {
    std::swap(order[i], order[lr.below(i + 1)]);
  }
  std::vector<int> labels(spec.n, 0);
  for (std::size_t i = 0; i < pos; ++i) labels[order[i]] = 1;

  Dataset ds;
  ds.root = "synthetic";
  ds.images.reserve(spec.n);
  std::vector<ManifestEntry> entries;
  entries.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    ds.images.push_back(render_synthetic(spec, i, labels[i]));
    entries.push_back({ds.images.back().source_id, labels[i], encode_ppm(ds.images.back())});
  }
  ds.manifest_digest = manifest_digest(std::move(entries));
  return ds;
}

std::string encode_ppm(const ImagePatch& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                    "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp(std::round(static_cast<double>(img.pixels[i])), 0.0, 255.0);
    out[header + i] = static_cast<char>(static_cast<unsigned char>(v));
  }
  return out;
}

ImagePatch decode_ppm(std::string_view bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t start = pos;
    long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1'000'000) throw DataError(origin + ": PPM " + what + " out of range");
      ++pos;
    }
    if (pos == start) throw DataError(origin + ": PPM header missing " + what);
    return static_cast<std::size_t>(v);
  };
  if (bytes.substr(0, 2) != "P6") throw DataError(origin + ": not a binary PPM (P6)");
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (maxval != 255) {
    throw DataError(origin + ": PPM maxval " + std::to_string(maxval) + ", expected 255");
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw DataError(origin + ": malformed PPM header");
  }
  ++pos;
  const std::size_t n = w * h * 3;
  if (bytes.size() - pos != n) {
    throw DataError(origin + ": PPM holds " + std::to_string(bytes.size() - pos) +
                    " pixel bytes, header implies " + std::to_string(n));
  }
  ImagePatch img = ImagePatch::blank(h, w);
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i]));
  }
  return img;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  std::string csv = "filename,label\n";
  for (const auto& img : ds.images) {
    if (img.source_id.empty() || img.source_id.find_first_of("/,\n") != std::string::npos) {
      throw UsageError("write_dataset: unusable file name '" + img.source_id + "'");
    }
    write_file(dir / img.source_id, encode_ppm(img));
    csv += img.source_id + "," + std::to_string(img.label) + "\n";
  }
  write_file(dir / "labels.csv", csv);
}

Dataset load_dataset(const fs::path& root) {
  const fs::path manifest = root / "labels.csv";
  if (!fs::exists(manifest)) throw DataError("dataset: " + manifest.string() + " not found");
  const std::string text = read_file(manifest, "dataset");
  std::istringstream lines(text);
  std::string line;
  if (!std::getline(lines, line)) throw DataError("dataset: labels.csv is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "filename,label") {
    throw DataError("dataset: labels.csv header is '" + line + "', expected 'filename,label'");
  }
  Dataset ds;
  ds.root = root.string();
  std::vector<ManifestEntry> entries;
  std::size_t row = 1;
  while (std::getline(lines, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "labels.csv row " + std::to_string(row);
    const auto comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0) {
      throw DataError(where + ": expected 'filename,label', got '" + line + "'");
    }
    const std::string name = line.substr(0, comma), lab = line.substr(comma + 1);
    if (lab != "0" && lab != "1") {
      throw DataError(where + ": label '" + lab + "' is not 0 or 1");
    }
    const fs::path file = root / name;
    if (!fs::exists(file)) throw DataError(where + ": missing image " + file.string());
    std::string bytes = read_file(file, where);
    ImagePatch img = decode_ppm(bytes, where + " (" + name + ")");
    if (img.height != kPatchSide || img.width != kPatchSide) {
      throw DataError(where + " (" + name + "): image is " + std::to_string(img.width) + "x" +
                      std::to_string(img.height) + ", expected " + std::to_string(kPatchSide) +
                      "x" + std::to_string(kPatchSide));
    }
    img.label = lab == "1";
    img.source_id = name;
    entries.push_back({name, img.label, std::move(bytes)});
    ds.images.push_back(std::move(img));
  }
  if (ds.images.empty()) throw DataError("dataset: labels.csv lists no images");
  ds.manifest_digest = manifest_digest(std::move(entries));
  return ds;
}

std::string manifest_digest(std::vector<ManifestEntry> entries) {
  std::sort(entries.begin(), entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.filename < b.filename; });
  Sha256 h;
  for (const auto& e : entries) {
    const std::uint64_t size = e.bytes.size();
    h.update(e.filename).update("\0", 1);
    h.update(e.label ? "1" : "0").update("\0", 1);
    h.update(&size, sizeof size).update(e.bytes);
  }
  return to_hex(h.finish());
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction,
                                          std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw UsageError("split: train fraction must lie in (0, 1), got " +
                     std::to_string(train_fraction));
  }
  std::vector<char> to_train(ds.size(), 0);
  const CounterRng root(seed);
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.images[i].label == cls) members.push_back(i);
    }
    CounterRng rng = root.split(static_cast<std::uint64_t>(cls));
    for (std::size_t i = members.size(); i > 1; --i) {
      std::swap(members[i - 1], members[rng.below(i)]);
    }
    const auto k = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(members.size())));
    for (std::size_t i = 0; i < k; ++i) to_train[members[i]] = 1;
  }
  std::pair<Dataset, Dataset> out;
  for (auto* part : {&out.first, &out.second}) {
    part->root = ds.root;
    part->manifest_digest = ds.manifest_digest;
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    (to_train[i] ? out.first : out.second).images.push_back(ds.images[i]);
  }
  if (out.first.images.empty() || out.second.images.empty()) {
    throw UsageError("split: fraction " + std::to_string(train_fraction) + " of " +
                     std::to_string(ds.size()) + " samples leaves an empty split");
  }
  return out;
}

}  // namespace effnet
