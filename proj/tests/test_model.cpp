#include <gtest/gtest.h>

#include <random>
#include <set>

#include "tscnn/loss.hpp"
#include "tscnn/model.hpp"

using namespace tscnn;
using D = Tensor<double>;

namespace {

ModelConfig small_cfg(std::size_t cc = 4) {
  ModelConfig c;
  c.base_channels = cc;
  c.num_scales = 4;
  c.input_size = 16;
  return c;
}

D random_tensor(Shape s, std::mt19937_64& rng, double lo = 0, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  D t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

TripletBatch<double> random_batch(std::mt19937_64& rng, std::size_t b = 2, std::size_t n = 16) {
  return {random_tensor({b, 1, n, n}, rng), random_tensor({b, 1, n, n}, rng), random_tensor({b, 1, n, n}, rng),
          D({b, 1, n, n}, 0.0)};
}

std::set<std::string> encoder_names(const ParamStore<double>& s) {
  std::set<std::string> out;
  for (const auto& [n, t] : s.params())
    if (n.starts_with("encoder.")) out.insert(n);
  return out;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = small_cfg();
  c.input_size = 12;  // not divisible by 8
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_cfg();
  c.base_channels = 0;
  EXPECT_THROW(build_tscnn<double>(c, 1), ConfigError);
  EXPECT_THROW(parse_model_kind("unet3d"), ConfigError);
  EXPECT_EQ(parse_model_kind("residual_unet"), ModelKind::ResidualUnet);
}

TEST(Build, EncoderNamesCarryNoTimeIndex) {
  auto m = build_tscnn<double>(small_cfg(), 1);
  const auto names = encoder_names(m.params());
  EXPECT_FALSE(names.empty());
  for (const auto& n : names) {
    for (const char* bad : {"t0", "t1", "t2", "time", "prev", "next", "cur"}) {
      EXPECT_EQ(n.find(bad), std::string::npos) << n;
    }
  }
  EXPECT_EQ(names, encoder_names(build_residual_unet<double>(small_cfg(), 1).params()));
}

TEST(Build, EncoderCountEqualsBaseline) {
  for (std::size_t cc : {2u, 4u, 8u}) {
    auto ts = build_tscnn<double>(small_cfg(cc), 1);
    auto base = build_residual_unet<double>(small_cfg(cc), 1);
    EXPECT_EQ(ts.params().count("encoder."), base.params().count("encoder."));
    EXPECT_GT(ts.params().count("decoder."), base.params().count("decoder."));
  }
}

TEST(Build, SameSeedBitwiseIdentical) {
  auto a = build_tscnn<double>(small_cfg(), 42), b = build_tscnn<double>(small_cfg(), 42);
  for (const auto& [n, t] : a.params().params()) EXPECT_EQ(t.values(), b.params().get(n).values()) << n;
  auto c = build_tscnn<double>(small_cfg(), 43);
  EXPECT_NE(a.params().get("encoder.stem.weight").values(), c.params().get("encoder.stem.weight").values());
}

TEST(Encoder, ShapeLadder) {
  auto m = build_tscnn<double>(small_cfg(4), 1);
  std::mt19937_64 rng(1);
  auto f = encode_slice(m, random_tensor({3, 1, 16, 16}, rng), Mode::Train);
  ASSERT_EQ(f.scales.size(), 4u);
  const std::vector<Shape> want{{3, 4, 16, 16}, {3, 8, 8, 8}, {3, 16, 4, 4}, {3, 32, 2, 2}};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(f.scales[i].shape(), want[i]);
  EXPECT_THROW(encode_slice(m, D({1, 1, 8, 8}), Mode::Train), InvalidShape);
  EXPECT_THROW(encode_slice(m, D({1, 2, 16, 16}), Mode::Train), InvalidShape);
}

TEST(Encoder, SharedWeightsGiveIdenticalFeatures) {
  auto m = build_tscnn<double>(small_cfg(), 2);
  std::mt19937_64 rng(2);
  const D x = random_tensor({2, 1, 16, 16}, rng);
  auto a = encode_slice(m, x, Mode::Eval), b = encode_slice(m, x.detach(), Mode::Eval);
  for (std::size_t i = 0; i < a.scales.size(); ++i) EXPECT_EQ(a.scales[i].values(), b.scales[i].values());
}

TEST(Encoder, PerturbingOneWeightMovesAllThreeSlices) {
  auto m = build_tscnn<double>(small_cfg(), 3);
  std::mt19937_64 rng(3);
  auto batch = random_batch(rng);
  auto before = std::array{encode_slice(m, batch.prev, Mode::Eval), encode_slice(m, batch.cur, Mode::Eval),
                           encode_slice(m, batch.next, Mode::Eval)};
  m.params().get("encoder.stage2.res.conv1.weight").data()[0] += 0.5;
  auto after = std::array{encode_slice(m, batch.prev, Mode::Eval), encode_slice(m, batch.cur, Mode::Eval),
                          encode_slice(m, batch.next, Mode::Eval)};
  for (int k = 0; k < 3; ++k) EXPECT_NE(before[k].scales[1].values(), after[k].scales[1].values());
}

TEST(TemporalConcat, BlockOrderAndRoundTrip) {
  auto fill = [](double v) {
    EncoderFeatures<double> f;
    f.scales = {D({2, 4, 8, 8}, v), D({2, 8, 4, 4}, v)};
    return f;
  };
  auto merged = temporal_concat(fill(1), fill(2), fill(3));
  ASSERT_EQ(merged.scales[0].shape(), (Shape{2, 12, 8, 8}));
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t c = fill(0).scales[i].dim(1);
    for (int blk = 0; blk < 3; ++blk) {
      D part = slice(merged.scales[i], 1, blk * c, c);
      EXPECT_DOUBLE_EQ(mean(part).item(), blk + 1.0);
    }
  }
  std::mt19937_64 rng(4);
  EncoderFeatures<double> a, b, c;
  for (auto* f : {&a, &b, &c}) f->scales = {random_tensor({2, 4, 8, 8}, rng), random_tensor({2, 8, 4, 4}, rng)};
  auto m = temporal_concat(a, b, c);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t ch = a.scales[i].dim(1);
    EXPECT_EQ(slice(m.scales[i], 1, 0, ch).values(), a.scales[i].values());
    EXPECT_EQ(slice(m.scales[i], 1, ch, ch).values(), b.scales[i].values());
    EXPECT_EQ(slice(m.scales[i], 1, 2 * ch, ch).values(), c.scales[i].values());
  }
  EncoderFeatures<double> odd;
  odd.scales = {D({2, 4, 8, 8}), D({2, 8, 2, 2})};
  EXPECT_THROW(temporal_concat(a, odd, c), InvalidShape);
}

TEST(Forward, ShapeRangeAndDeterminism) {
  for (auto kind : {ModelKind::TsCnn, ModelKind::ResidualUnet}) {
    auto m = build_model<double>(kind, small_cfg(), 5);
    std::mt19937_64 rng(5);
    auto batch = random_batch(rng, 3);
    D p = forward(m, batch, Mode::Train);
    EXPECT_EQ(p.shape(), (Shape{3, 1, 16, 16}));
    for (double v : p.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    D e1 = forward(m, batch, Mode::Eval), e2 = forward(m, batch, Mode::Eval);
    EXPECT_EQ(e1.values(), e2.values());
  }
}

TEST(Forward, SwappingNeighboursChangesOutput) {
  auto m = build_tscnn<double>(small_cfg(), 6);
  std::mt19937_64 rng(6);
  auto batch = random_batch(rng);
  D a = forward(m, batch, Mode::Eval);
  std::swap(batch.prev, batch.next);
  D b = forward(m, batch, Mode::Eval);
  EXPECT_NE(a.values(), b.values());
}

TEST(Forward, BaselineIgnoresNeighbours) {
  auto m = build_residual_unet<double>(small_cfg(), 7);
  std::mt19937_64 rng(7);
  auto batch = random_batch(rng);
  D a = forward(m, batch, Mode::Eval);
  batch.prev = random_tensor({2, 1, 16, 16}, rng);
  EXPECT_EQ(a.values(), forward(m, batch, Mode::Eval).values());
}

TEST(Architecture, BaselineSkipChannelsAreOneThird) {
  auto ts = build_tscnn<double>(small_cfg(4), 1);
  auto base = build_residual_unet<double>(small_cfg(4), 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(base.arch().merged_channels[i] * 3, ts.arch().merged_channels[i]);
  // Skip-concat inputs: upsampled C_i plus merged skip.
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ts.arch().decoder_concat_in[i] - 4 * (1u << i), 3 * (base.arch().decoder_concat_in[i] - 4 * (1u << i)));
  }
  EXPECT_NE(ts.arch().describe().find("time_steps 3"), std::string::npos);
}

TEST(Predict, StrictThreshold) {
  D p({1, 1, 2, 2}, std::vector<double>{0.2, 0.7, 0.5, 0.51});
  EXPECT_EQ(predict(p, 0.5).values(), (std::vector<double>{0, 1, 0, 1}));
  EXPECT_EQ(predict(D({4}, 0.4), 0.5).values(), std::vector<double>(4, 0.0));
  EXPECT_EQ(predict(D({4}, 0.9), 0.5).values(), std::vector<double>(4, 1.0));
}

TEST(Checkpoint, ModelRoundTripInfersArchitecture) {
  for (auto kind : {ModelKind::TsCnn, ModelKind::ResidualUnet}) {
    auto cfg = small_cfg(2);
    cfg.num_scales = 3;
    auto m = build_model<float>(kind, cfg, 9);
    auto back = model_from_checkpoint<float>(decode_checkpoint<float>(encode_checkpoint(m.params())), 16);
    EXPECT_EQ(back.arch().kind, kind);
    EXPECT_EQ(back.config().base_channels, 2u);
    EXPECT_EQ(back.config().num_scales, 3u);
    EXPECT_EQ(encode_checkpoint(back.params()), encode_checkpoint(m.params()));
  }
}

TEST(Gradient, EndToEndSbflFrozenBeta) {
  auto m = build_tscnn<double>(small_cfg(2), 11);
  std::mt19937_64 rng(11);
  auto batch = random_batch(rng, 2);
  std::bernoulli_distribution fg(0.2);
  for (auto& v : batch.target.data()) v = fg(rng) ? 1 : 0;
  FocalConfig fc;
  const double beta = sbfl(batch.target, forward(m, batch, Mode::Train), fc).second.beta;
  auto loss = [&] { return sbfl_with_beta(batch.target, forward(m, batch, Mode::Train), fc, beta); };
  m.params().zero_grad();
  backward(loss());
  double worst = 0;
  for (auto& [name, p] : m.params().params()) {
    for (std::size_t i = 0; i < std::min<std::size_t>(p.size(), 6); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + 1e-5;
      const double up = loss().item();
      p.data()[i] = saved - 1e-5;
      const double down = loss().item();
      p.data()[i] = saved;
      worst = std::max(worst, std::abs(p.grad()[i] - (up - down) / 2e-5));
    }
  }
  EXPECT_LE(worst, 1e-4);
}
