#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "effnet/blocks.hpp"
#include "effnet/errors.hpp"
#include "effnet/model.hpp"
#include "effnet/ops.hpp"

using namespace effnet;

namespace {

Tensor random_batch(std::size_t n, std::size_t side, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<double> v(n * 3 * side * side);
  for (double& x : v) x = rng.normal();
  return Tensor::from({n, 3, side, side}, std::move(v));
}

// Parameter count written out from the block recipe.
std::size_t expected_parameters(const ModelConfig& cfg) {
  std::size_t total = cfg.stem_channels * 27 + 2 * cfg.stem_channels;
  std::size_t in = cfg.stem_channels;
  std::vector<std::size_t> outs;
  for (const auto& s : cfg.stages) {
    for (std::size_t b = 0; b < s.blocks; ++b) {
      const std::size_t e = in * s.expansion;
      if (s.expansion != 1) total += e * in + 2 * e;
      total += e * s.kernel * s.kernel + 2 * e;
      if (cfg.block_se) total += 2 * e * (e / cfg.se_reduction);
      total += s.channels * e + 2 * s.channels;
      outs.push_back(s.channels);
      in = s.channels;
    }
  }
  std::size_t width = in;
  if (cfg.ff) {
    for (auto t : cfg.tap_blocks) {
      width += outs[t];
      if (cfg.attention) total += 2 * outs[t] * (outs[t] / cfg.se_reduction);
    }
  }
  return total + width + 1;
}

ModelConfig flags(bool rds, bool ff, bool attention) {
  ModelConfig c;
  c.rds = rds;
  c.ff = ff;
  c.attention = attention;
  return c;
}

}  // namespace

TEST(SeBlock, ShapesAndRange) {
  CounterRng rng(1);
  SEBlock se = SEBlock::create(8, 4, rng);
  EXPECT_EQ(se.reduced, 2u);
  Tensor u = random_batch(2, 5, 3).reshape({2, 3, 5, 5});
  EXPECT_THROW(se_forward(u, se), ShapeError);
  Tensor u8 = Tensor::from({1, 8, 2, 2}, std::vector<double>(32, 1.0));
  Tensor z = squeeze(u8);
  EXPECT_EQ(z.shape(), (Shape{1, 8}));
  Tensor s = excite(z, se);
  for (double v : s.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  Tensor out = se_scale(u8, s);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_DOUBLE_EQ(out.at(c * 4 + 3), s.at(c));
  EXPECT_THROW(SEBlock::create(6, 4, rng), ConfigError);
}

TEST(MBConv, SkipOnlyWhenShapesAgree) {
  MBConvSpec a{16, 16, 1, 3, 1, true, 4};
  MBConvSpec b{16, 24, 6, 3, 2, true, 4};
  MBConvSpec c{24, 24, 6, 3, 2, true, 4};
  EXPECT_TRUE(a.skip());
  EXPECT_FALSE(b.skip());
  EXPECT_FALSE(c.skip());
  CounterRng rng(2);
  MBConvBlock blk = MBConvBlock::create(b, rng);
  EXPECT_TRUE(blk.expand_w.defined());
  Tensor x = random_batch(1, 12, 4).reshape({1, 3, 12, 12});
  EXPECT_THROW(mbconv_forward(x, blk), ShapeError);
  std::vector<double> v(16 * 12 * 12, 0.5);
  Tensor y = mbconv_forward(Tensor::from({1, 16, 12, 12}, v), blk);
  EXPECT_EQ(y.shape(), (Shape{1, 24, 6, 6}));
  EXPECT_EQ(blk.output_side(12), 6u);
}

TEST(Model, FinalMapSideFollowsRds) {
  for (bool rds : {false, true}) {
    EffNetMini m = build_model(flags(rds, false, false));
    const FeatureMaps fm = m.features(random_batch(1, 96, 5));
    EXPECT_EQ(fm.final_map.dim(2), rds ? 6u : 3u);
    EXPECT_EQ(fm.final_map.dim(3), rds ? 6u : 3u);
    EXPECT_EQ(fm.final_map.dim(1), 80u);
    EXPECT_EQ(downsampling_factor(m.config()), rds ? 16 : 32);
  }
}

TEST(Model, LogitShapeAndParameterCounts) {
  for (bool rds : {false, true})
    for (int f = 0; f < 3; ++f) {
      const ModelConfig cfg = flags(rds, f >= 1, f == 2);
      EffNetMini m = build_model(cfg);
      EXPECT_EQ(count_parameters(m), expected_parameters(cfg)) << cfg.flags_label();
      Tensor y = m.forward(random_batch(2, 96, 6));
      EXPECT_EQ(y.shape(), (Shape{2, 1}));
    }
  // rds changes only resolution, never parameter count
  EXPECT_EQ(count_parameters(build_model(flags(false, true, true))),
            count_parameters(build_model(flags(true, true, true))));
  EXPECT_EQ(build_model(flags(false, true, false)).classifier_width(), 80u + 16 + 24 + 40);
}

TEST(Model, TapsAreTheConfiguredBlocks) {
  EffNetMini m = build_model(flags(false, true, false));
  const FeatureMaps fm = m.features(random_batch(1, 96, 7));
  ASSERT_EQ(fm.taps.size(), 3u);
  EXPECT_EQ(fm.taps[0].dim(1), 16u);
  EXPECT_EQ(fm.taps[1].dim(1), 24u);
  EXPECT_EQ(fm.taps[2].dim(1), 40u);
}

TEST(Model, AttentionWithoutFusionIsRejected) {
  EXPECT_THROW(build_model(flags(false, false, true)), ConfigError);
  EXPECT_THROW(flags(true, false, true).validate(), ConfigError);
  ModelConfig bad;
  bad.stages[0].stride = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  ModelConfig tap;
  tap.ff = true;
  tap.tap_blocks = {0, 6};
  EXPECT_THROW(tap.validate(), ConfigError);
}

TEST(Model, InitializationIsSeeded) {
  ModelConfig a;
  a.seed = 3;
  ModelConfig b = a;
  ModelConfig c = a;
  c.seed = 4;
  const auto pa = build_model(a).parameters();
  const auto pb = build_model(b).parameters();
  const auto pc = build_model(c).parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    ASSERT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                           pb[i].tensor.data().begin()));
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                    pc[i].tensor.data().begin()))
      differs = true;
  }
  EXPECT_TRUE(differs);
}

TEST(Model, FusionFlagsLeaveBackboneInitAlone) {
  ModelConfig base;
  ModelConfig full = flags(true, true, true);
  const auto pa = build_model(base).parameters();
  const auto pb = build_model(full).parameters();
  for (std::size_t i = 0; i < pa.size() - 2; ++i) {  // classifier widths differ
    ASSERT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                           pb[i].tensor.data().begin()))
        << pa[i].name;
  }
}

TEST(Model, ActivationsStayInRangeAtInit) {
  for (bool rds : {false, true}) {
    EffNetMini m = build_model(flags(rds, true, true));
    const FeatureMaps fm = m.features(random_batch(2, 96, 8));
    double s2 = 0;
    for (double v : fm.final_map.data()) s2 += v * v;
    const double rms = std::sqrt(s2 / fm.final_map.numel());
    EXPECT_GT(rms, 0.1);
    EXPECT_LT(rms, 10.0);
  }
}
