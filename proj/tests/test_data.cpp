#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "effnet/data.hpp"
#include "effnet/errors.hpp"

using namespace effnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("effnet_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool in_center(std::size_t r, std::size_t c) {
  return r >= kCenterLo && r < kCenterLo + kCenterSide && c >= kCenterLo &&
         c < kCenterLo + kCenterSide;
}

double center_mean(const ImagePatch& img) {
  double s = 0;
  for (std::size_t r = kCenterLo; r < kCenterLo + kCenterSide; ++r)
    for (std::size_t c = kCenterLo; c < kCenterLo + kCenterSide; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) s += img.at(r, c, ch);
  return s / (kCenterSide * kCenterSide * 3);
}

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() -
                             static_cast<double>(j) / b.size()));
  }
  return d;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

}  // namespace

TEST(Synthetic, ExactPositiveCountAndDeterminism) {
  SynthSpec spec;
  spec.n = 200;
  spec.seed = 4;
  const Dataset a = generate_synthetic(spec);
  const Dataset b = generate_synthetic(spec);
  EXPECT_EQ(a.size(), 200u);
  EXPECT_EQ(a.positives(), 81u);  // round(200 * 0.405)
  EXPECT_EQ(a.manifest_digest, b.manifest_digest);
  EXPECT_EQ(a.manifest_digest.size(), 64u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a.images[i].pixels, b.images[i].pixels);
    ASSERT_EQ(a.images[i].height, kPatchSide);
    for (float p : a.images[i].pixels) {
      ASSERT_EQ(p, std::round(p));
      ASSERT_GE(p, 0.0f);
      ASSERT_LE(p, 255.0f);
    }
  }
  spec.seed = 5;
  EXPECT_NE(generate_synthetic(spec).manifest_digest, a.manifest_digest);
}

TEST(Synthetic, SignalIsConfinedToTheCenterBlock) {
  SynthSpec spec;
  spec.seed = 9;
  double diff_sum = 0;
  const std::size_t images = 60;
  for (std::size_t i = 0; i < images; ++i) {
    const ImagePatch neg = render_synthetic(spec, i, 0);
    const ImagePatch pos = render_synthetic(spec, i, 1);
    for (std::size_t r = 0; r < kPatchSide; ++r)
      for (std::size_t c = 0; c < kPatchSide; ++c)
        for (std::size_t ch = 0; ch < 3; ++ch) {
          if (!in_center(r, c)) {
            ASSERT_EQ(pos.at(r, c, ch), neg.at(r, c, ch));
          }
        }
    diff_sum += center_mean(pos) - center_mean(neg);
  }
  // Stripes darken by signal * mean(0.5 + 0.5 cos) * mean channel weight.
  const double expect = -spec.signal_strength * 0.5 * (0.8 + 1.0 + 0.5) / 3.0;
  EXPECT_NEAR(diff_sum / images, expect, 0.1 * std::abs(expect));
}

TEST(Synthetic, NullSignalLeavesClassesIndistinguishable) {
  SynthSpec spec;
  spec.n = 600;
  spec.seed = 12;
  spec.signal_strength = 0.0;
  const Dataset ds = generate_synthetic(spec);
  std::vector<double> pos, neg;
  for (const auto& img : ds.images) (img.label ? pos : neg).push_back(center_mean(img));
  const double n = pos.size(), m = neg.size();
  // Critical value at alpha = 0.001.
  EXPECT_LT(ks_statistic(pos, neg), 1.95 * std::sqrt((n + m) / (n * m)));
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(render_synthetic(spec, i, 0).pixels, render_synthetic(spec, i, 1).pixels);
  }
}

TEST(Synthetic, SpecValidation) {
  SynthSpec s;
  s.pos_fraction = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthSpec{};
  s.signal_strength = -1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthSpec{};
  s.n = 1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Ppm, RoundTripAndHeaderComments) {
  SynthSpec spec;
  const ImagePatch img = render_synthetic(spec, 3, 1);
  const ImagePatch back = decode_ppm(encode_ppm(img), "x");
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(back.width, kPatchSide);

  std::string tiny = "P6\n# a comment\n2 1\n255\n";
  tiny += std::string("\x01\x02\x03\xff\x00\x10", 6);
  const ImagePatch t = decode_ppm(tiny, "tiny");
  EXPECT_EQ(t.width, 2u);
  EXPECT_EQ(t.at(0, 1, 0), 255.0f);
  EXPECT_EQ(t.at(0, 1, 2), 16.0f);

  EXPECT_THROW(decode_ppm("P3\n2 1\n255\n", "x"), DataError);
  EXPECT_THROW(decode_ppm("P6\n2 1\n65535\n", "x"), DataError);
  EXPECT_THROW(decode_ppm(tiny.substr(0, tiny.size() - 1), "x"), DataError);
}

TEST(Dataset, WriteLoadRoundTrip) {
  SynthSpec spec;
  spec.n = 12;
  const Dataset ds = generate_synthetic(spec);
  const fs::path dir = scratch("roundtrip");
  write_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.manifest_digest, ds.manifest_digest);
  EXPECT_EQ(back.labels(), ds.labels());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.images[i].pixels, ds.images[i].pixels);
    EXPECT_EQ(back.images[i].source_id, ds.images[i].source_id);
  }
}

TEST(Dataset, MalformedManifestsNameTheRow) {
  SynthSpec spec;
  spec.n = 4;
  const Dataset ds = generate_synthetic(spec);
  const fs::path dir = scratch("bad");
  write_dataset(ds, dir);
  const std::string first = ds.images[0].source_id;

  auto expect_error = [&](const std::string& csv, const std::string& needle) {
    write_text(dir / "labels.csv", csv);
    try {
      load_dataset(dir);
      ADD_FAILURE() << "no error for " << csv;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("name,label\n", "header");
  expect_error("filename,label\n" + first + ",2\n", "row 2");
  expect_error("filename,label\n" + first + ",1\nmissing.ppm,0\n", "row 3");
  expect_error("filename,label\n", "no images");

  write_text(dir / "small.ppm", "P6\n2 2\n255\n" + std::string(12, '\0'));
  expect_error("filename,label\nsmall.ppm,0\n", "image is 2x2");

  write_text(dir / "labels.csv", "filename,label\r\n" + first + ",1\r\n");
  EXPECT_EQ(load_dataset(dir).size(), 1u);
  EXPECT_THROW(load_dataset(dir / "nope"), DataError);
}

TEST(Dataset, ManifestDigestIsOrderFreeAndLabelSensitive) {
  std::vector<ManifestEntry> a{{"a.ppm", 0, "xx"}, {"b.ppm", 1, "yyy"}};
  std::vector<ManifestEntry> b{{"b.ppm", 1, "yyy"}, {"a.ppm", 0, "xx"}};
  std::vector<ManifestEntry> c{{"a.ppm", 1, "xx"}, {"b.ppm", 1, "yyy"}};
  EXPECT_EQ(manifest_digest(a), manifest_digest(b));
  EXPECT_NE(manifest_digest(a), manifest_digest(c));
}

TEST(Split, StratifiedDisjointAndOrdered) {
  SynthSpec spec;
  spec.n = 250;
  spec.seed = 2;
  const Dataset ds = generate_synthetic(spec);
  const auto [tr, va] = split_dataset(ds, 0.8, 7);
  const std::size_t pos = ds.positives(), neg = ds.negatives();
  EXPECT_EQ(tr.positives(), static_cast<std::size_t>(std::llround(0.8 * pos)));
  EXPECT_EQ(tr.negatives(), static_cast<std::size_t>(std::llround(0.8 * neg)));
  EXPECT_EQ(tr.size() + va.size(), ds.size());

  std::set<std::string> names;
  for (const auto* part : {&tr, &va}) {
    std::string prev;
    for (const auto& img : part->images) {
      EXPECT_TRUE(names.insert(img.source_id).second);
      EXPECT_LT(prev, img.source_id);  // original order kept
      prev = img.source_id;
    }
  }
  const auto again = split_dataset(ds, 0.8, 7);
  EXPECT_EQ(again.first.labels(), tr.labels());
  auto names_of = [](const Dataset& d) {
    std::vector<std::string> v;
    for (const auto& img : d.images) v.push_back(img.source_id);
    return v;
  };
  EXPECT_EQ(names_of(again.first), names_of(tr));
  EXPECT_NE(names_of(split_dataset(ds, 0.8, 8).first), names_of(tr));
  EXPECT_THROW(split_dataset(ds, 1.0, 7), UsageError);
  EXPECT_THROW(split_dataset(ds, 0.001, 7), UsageError);
}
