#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "effnet/augment.hpp"
#include "effnet/errors.hpp"

using namespace effnet;

namespace {

ImagePatch random_image(std::size_t side, CounterRng& rng) {
  ImagePatch img = ImagePatch::blank(side, side);
  for (float& p : img.pixels) p = static_cast<float>(rng.integer(0, 255));
  return img;
}

bool center_intact(const ImagePatch& src, const ImagePatch& out, std::size_t r0,
                   std::size_t c0) {
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        if (out.at(r0 + r, c0 + c, ch) != src.at(32 + r, 32 + c, ch)) return false;
  return true;
}

}  // namespace

TEST(RandomCenterCrop, CenterBlockLandsAtShiftedOrigin) {
  AugmentConfig cfg;
  CounterRng rng(5);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (int i = 0; i < 500; ++i) {
    const ImagePatch img = random_image(96, rng);
    CropOffsets off;
    const ImagePatch out = random_center_crop(img, cfg, rng, &off);
    ASSERT_EQ(out.height, 96u);
    ASSERT_LE(off.row, 16u);
    ASSERT_LE(off.col, 16u);
    seen.insert({off.row, off.col});
    const std::size_t dr = off.row, dc = off.col;
    ASSERT_TRUE(center_intact(img, out, 40 - dr, 40 - dc));
  }
  EXPECT_GT(seen.size(), 200u);  // both axes explored
}

TEST(RandomCenterCrop, PaddingIsConstantOrReflect) {
  CounterRng rng(6);
  const ImagePatch img = random_image(96, rng);
  AugmentConfig cfg;
  const ImagePatch corner = crop_padded(img, cfg, {0, 0});
  EXPECT_EQ(corner.at(0, 0, 0), 0.0f);
  EXPECT_EQ(corner.at(7, 7, 2), 0.0f);
  EXPECT_EQ(corner.at(8, 8, 1), img.at(0, 0, 1));

  cfg.fill = PadFill::reflect;
  const ImagePatch refl = crop_padded(img, cfg, {0, 0});
  // padded row 7 -> source row -1 -> reflects to row 1
  EXPECT_EQ(refl.at(7, 8, 0), img.at(1, 0, 0));
  EXPECT_EQ(refl.at(0, 0, 0), img.at(8, 8, 0));
}

TEST(RandomCenterCrop, RejectsGeometryThatCanCutTheCenter) {
  AugmentConfig cfg;
  cfg.pad = 40;
  EXPECT_THROW(cfg.validate(96), ConfigError);
  cfg = AugmentConfig{};
  cfg.crop = 120;
  EXPECT_THROW(cfg.validate(96), ConfigError);
  cfg = AugmentConfig{};
  EXPECT_NO_THROW(cfg.validate(96));
  EXPECT_THROW(crop_padded(ImagePatch::blank(96, 96), cfg, {17, 0}), ConfigError);
}

TEST(Flips, AreInvolutions) {
  CounterRng rng(7);
  const ImagePatch img = random_image(9, rng);
  EXPECT_EQ(flip_horizontal(flip_horizontal(img)).pixels, img.pixels);
  EXPECT_EQ(flip_vertical(flip_vertical(img)).pixels, img.pixels);
  const ImagePatch h = flip_horizontal(img);
  EXPECT_EQ(h.at(2, 0, 1), img.at(2, 8, 1));
  const ImagePatch v = flip_vertical(img);
  EXPECT_EQ(v.at(0, 3, 2), img.at(8, 3, 2));
}

TEST(Flips, ProbabilitiesAreHonoured) {
  CounterRng rng(8);
  ImagePatch img = random_image(4, rng);
  int h = 0;
  const int trials = 4000;
  for (int i = 0; i < trials; ++i) {
    const ImagePatch out = random_flip(img, 0.25, 0.0, rng);
    if (out.pixels != img.pixels) ++h;
  }
  EXPECT_NEAR(h / static_cast<double>(trials), 0.25, 0.03);
  EXPECT_THROW(random_flip(img, 1.5, 0.0, rng), ConfigError);
}

TEST(Normalize, ChannelFirstAndStatsMatchDirectSums) {
  CounterRng rng(9);
  std::vector<ImagePatch> imgs{random_image(5, rng), random_image(5, rng)};
  const ChannelStats st = channel_stats(imgs);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double s = 0, s2 = 0, n = 0;
    for (const auto& im : imgs)
      for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) {
          s += im.at(r, c, ch);
          s2 += im.at(r, c, ch) * static_cast<double>(im.at(r, c, ch));
          n += 1;
        }
    EXPECT_NEAR(st.mean[ch], s / n, 1e-9);
    EXPECT_NEAR(st.std[ch], std::sqrt(s2 / n - (s / n) * (s / n)), 1e-8);
  }
  const Tensor t = normalize(imgs[0], st.mean, st.std);
  EXPECT_EQ(t.shape(), (Shape{3, 5, 5}));
  EXPECT_DOUBLE_EQ(t.at(2 * 25 + 1 * 5 + 3), (imgs[0].at(1, 3, 2) - st.mean[2]) / st.std[2]);
  EXPECT_THROW(channel_stats({}), UsageError);
}

TEST(AugmentationStream, DependsOnlyOnSeedEpochIndex) {
  CounterRng a = augmentation_stream(1, 2, 3);
  CounterRng b = augmentation_stream(1, 2, 3);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(augmentation_stream(1, 2, 3).next_u64(), augmentation_stream(1, 3, 3).next_u64());
  EXPECT_NE(augmentation_stream(1, 2, 3).next_u64(), augmentation_stream(1, 2, 4).next_u64());
  EXPECT_NE(augmentation_stream(1, 2, 3).next_u64(), augmentation_stream(2, 2, 3).next_u64());
}

TEST(AugmentTraining, WithoutRccOnlyFlips) {
  CounterRng rng(10);
  const ImagePatch img = random_image(96, rng);
  AugmentConfig cfg;
  for (int i = 0; i < 20; ++i) {
    const ImagePatch out = augment_training(img, cfg, false, rng);
    const bool same = out.pixels == img.pixels;
    const bool h = out.pixels == flip_horizontal(img).pixels;
    const bool v = out.pixels == flip_vertical(img).pixels;
    const bool hv = out.pixels == flip_vertical(flip_horizontal(img)).pixels;
    EXPECT_TRUE(same || h || v || hv);
  }
}
