#include <gtest/gtest.h>

#include <filesystem>

#include "dclr/encoder.hpp"
#include "support.hpp"

using namespace dclr;
using namespace dclr::encoder;

namespace {

DUNetConfig small(bool extra = true) { return DUNetConfig{2, 4, 16, 6, 5, 3, extra}; }

}  // namespace

TEST(Encoder, OutputShapes) {
  auto m = init_model(small(), 3);
  Rng rng = make_rng(1, "enc");
  auto x = check::random_tensor({3, 3, 16, 16}, rng, 0, 1);
  auto h = encode(x, m);
  EXPECT_EQ(h.shape(), (Shape{3, 6}));
  EXPECT_EQ(project(h, m).shape(), (Shape{3, 3}));
}

TEST(Encoder, IdenticalInputsGiveIdenticalRows) {
  auto m = init_model(small(), 4);
  Rng rng = make_rng(2, "enc");
  auto one = check::random_tensor({1, 3, 16, 16}, rng, 0, 1);
  Tensor x({2, 3, 16, 16});
  std::copy(one.data().begin(), one.data().end(), x.data().begin());
  std::copy(one.data().begin(), one.data().end(), x.data().begin() + one.numel());
  auto h = encode(x, m);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(h.at(0, j), h.at(1, j));
}

TEST(Encoder, ExtraBottleneckConvAddsOneLayer) {
  const auto deep = init_model(small(true), 1), shallow = init_model(small(false), 1);
  const std::size_t cb = 4 << 2;
  EXPECT_EQ(deep.parameter_count() - shallow.parameter_count(), cb * cb * 9 + cb);
}

TEST(Encoder, RejectsIndivisibleInputSide) {
  auto c = small();
  c.input_side = 18;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Encoder, SeedDeterminesInitialization) {
  EXPECT_EQ(init_model(small(), 9).params, init_model(small(), 9).params);
  EXPECT_NE(init_model(small(), 9).params, init_model(small(), 10).params);
}

TEST(Encoder, CheckpointRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "dclr_test_ckpt";
  std::filesystem::remove_all(dir);
  const auto m = init_model(small(false), 5);
  save_checkpoint(dir, m);
  const auto back = load_checkpoint(dir);
  EXPECT_EQ(back.names, m.names);
  EXPECT_EQ(back.params, m.params);
  EXPECT_FALSE(back.config.extra_bottleneck_conv);
  std::filesystem::remove(dir / "head.w.dten");
  EXPECT_THROW(load_checkpoint(dir), FormatError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_checkpoint(dir), FormatError);
}

TEST(WeightMap, MatchesBruteForce) {
  LabelMap m({12, 14});
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 1; x < 5; ++x) m.at(y, x) = 1;
  for (std::size_t y = 3; y < 9; ++y)
    for (std::size_t x = 7; x < 11; ++x) m.at(y, x) = 2;
  for (std::size_t y = 9; y < 12; ++y)
    for (std::size_t x = 2; x < 6; ++x) m.at(y, x) = 3;
  const std::array<double, 2> wc{0.7, 1.9};
  const auto w = weight_map(m, 10.0, 5.0, wc);
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 14; ++x)
      EXPECT_NEAR(w.at(y, x), check::weight_reference(m, y, x, 10.0, 5.0, wc[m.at(y, x) > 0]), 1e-5) << y << "," << x;
}

TEST(WeightMap, GapBetweenTouchingInstancesGetsFullBoost) {
  LabelMap m({5, 7});
  for (std::size_t y = 0; y < 5; ++y) {
    for (std::size_t x = 0; x < 3; ++x) m.at(y, x) = 1;
    for (std::size_t x = 4; x < 7; ++x) m.at(y, x) = 2;
  }
  const std::array<double, 2> wc{1.0, 1.0};
  const auto w = weight_map(m, 10.0, 5.0, wc);
  EXPECT_NEAR(w.at(2, 3), 11.0, 1e-5);
}

TEST(WeightMap, ClassBalanceMeanIsOne) {
  LabelMap m({4, 4});
  m.at(0, 0) = m.at(0, 1) = m.at(1, 1) = 1;
  const auto wc = class_balance(m, std::nullopt);
  EXPECT_NEAR(wc.sum() / 16.0, 1.0, 1e-12);
  EXPECT_NEAR(wc.at(0, 0), 16.0 / 6.0, 1e-12);
}

TEST(WeightMap, EmptyMaskWarnsAndReturnsClassWeights) {
  std::vector<std::string> warnings;
  log::ScopedSink sink([&](const std::string& s) { warnings.push_back(s); });
  const auto w = weight_map(LabelMap({3, 3}), 10.0, 5.0);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_EQ(w, Tensor({3, 3}, 1.0f));
  EXPECT_THROW(weight_map(LabelMap({3, 3}), 10.0, 0.0), std::invalid_argument);
}
