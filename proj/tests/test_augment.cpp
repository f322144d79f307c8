#include <gtest/gtest.h>

#include "dclr/augment.hpp"
#include "support.hpp"

using namespace dclr;
using namespace dclr::augment;
using check::random_tensor;

namespace {

Tensor rgb(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng = make_rng(seed, "augment_fixture");
  return random_tensor({3, h, w}, rng, 0.0, 1.0);
}

std::size_t count_zero(const Tensor& t) {
  std::size_t n = 0;
  for (float v : t.data()) n += v == 0.0f;
  return n;
}

}  // namespace

TEST(Augment, DefaultPolicyKeepsUnitRangeAndShape) {
  const auto policy = default_policy(24);
  for (std::uint64_t s = 0; s < 40; ++s) {
    auto v = sample_pair(rgb(32, 32, s), policy, 11, s);
    for (const Tensor* t : {&v.x_i, &v.x_j}) {
      EXPECT_EQ(t->shape(), (Shape{3, 24, 24}));
      for (float x : t->data()) ASSERT_TRUE(x >= 0.0f && x <= 1.0f);
    }
  }
}

TEST(Augment, AllGatesOffIsIdentity) {
  auto policy = default_policy();
  for (auto& t : policy.transforms) t.probability = 0.0;
  Rng rng = make_rng(1, "p");
  const auto x = rgb(9, 7, 2);
  EXPECT_EQ(apply_policy(x, policy, rng), x);
}

TEST(Augment, CutoutZeroesExpectedSquare) {
  const Tensor ones({1, 8, 8}, 1.0f);
  Rng rng = make_rng(3, "cut");
  EXPECT_EQ(count_zero(cutout(ones, 0.5, rng)), 16u);
  EXPECT_EQ(cutout(ones, 0.0, rng), ones);
  EXPECT_EQ(count_zero(cutout(ones, 1.0, rng)), 64u);
  EXPECT_THROW(cutout(ones, 1.5, rng), std::invalid_argument);
}

TEST(Augment, ColourDropGivesEqualChannels) {
  const auto y = colour_drop(rgb(5, 6, 4));
  const std::size_t P = 30;
  for (std::size_t p = 0; p < P; ++p) {
    EXPECT_EQ(y[p], y[P + p]);
    EXPECT_EQ(y[p], y[2 * P + p]);
  }
  const Tensor red({3, 1, 1}, std::vector<float>{1, 0, 0});
  EXPECT_NEAR(colour_drop(red)[0], 0.299f, 1e-6);
  EXPECT_THROW(colour_drop(Tensor({1, 2, 2})), ShapeError);
}

TEST(Augment, FlipTwiceIsIdentity) {
  const auto x = rgb(4, 5, 5);
  EXPECT_EQ(horizontal_flip(horizontal_flip(x)), x);
  EXPECT_EQ(horizontal_flip(x).at(1, 2, 0), x.at(1, 2, 4));
}

TEST(Augment, BlurBehaviour) {
  const Tensor flat({3, 8, 8}, 0.37f);
  EXPECT_LT(gaussian_blur(flat, 1.3).max_abs_diff(flat), 1e-6f);

  Tensor impulse({1, 9, 9});
  impulse.at(0, 4, 4) = 1.0f;
  const auto b = gaussian_blur(impulse, 1.0);
  EXPECT_LT(b.at(0, 4, 4), 1.0f);
  EXPECT_GT(b.at(0, 4, 4), b.at(0, 4, 5));
  EXPECT_NEAR(b.at(0, 4, 5), b.at(0, 5, 4), 1e-7);
  EXPECT_NEAR(b.at(0, 3, 4), b.at(0, 5, 4), 1e-7);

  const auto x = rgb(16, 16, 6);
  EXPECT_NEAR(gaussian_blur(x, 0.8).sum() / 768.0, x.sum() / 768.0, 1e-4);
  EXPECT_THROW(gaussian_blur(x, 0.0), std::invalid_argument);
}

TEST(Augment, SobelOfConstantIsZero) { EXPECT_EQ(count_zero(sobel(Tensor({3, 6, 6}, 0.5f))), 108u); }

TEST(Augment, FullScaleCropAtInputSizeIsIdentity) {
  const auto x = rgb(12, 12, 7);
  Rng rng = make_rng(8, "crop");
  EXPECT_LE(random_resized_crop(x, 1.0, 1.0, 12, 12, rng).max_abs_diff(x), 1e-6f);
  EXPECT_THROW(random_resized_crop(x, 0.0, 1.0, 12, 12, rng), std::invalid_argument);
}

TEST(Augment, JitterZeroStrengthIsIdentity) {
  const auto x = rgb(6, 6, 9);
  Rng rng = make_rng(10, "jit");
  EXPECT_EQ(colour_jitter(x, 0.0, rng), x);
}

TEST(Augment, BrightnessClampsAndContrastExample) {
  const Tensor x({1, 1, 2}, std::vector<float>{0.6f, 0.9f});
  const auto b = adjust_brightness(x, 1.5);
  EXPECT_FLOAT_EQ(b[0], 0.9f);
  EXPECT_EQ(b[1], 1.0f);
  // Mean 0.4, factor 0.5: 0.8 -> 0.4 + 0.5 * 0.4 = 0.6.
  const Tensor c({1, 1, 2}, std::vector<float>{0.8f, 0.0f});
  EXPECT_NEAR(adjust_contrast(c, 0.5)[0], 0.6f, 1e-6);
  EXPECT_NEAR(adjust_contrast(c, 0.5)[1], 0.2f, 1e-6);
}

TEST(Augment, SamplePairIsDeterministicPerSeedAndSource) {
  const auto x = rgb(32, 32, 12);
  const auto policy = default_policy();
  auto a = sample_pair(x, policy, 5, 3), b = sample_pair(x, policy, 5, 3);
  EXPECT_EQ(a.x_i, b.x_i);
  EXPECT_EQ(a.x_j, b.x_j);
  EXPECT_NE(sample_pair(x, policy, 5, 4).x_i, a.x_i);
}

TEST(Augment, DefaultPolicyViewsDiffer) {
  const auto x = rgb(32, 32, 13);
  const auto policy = default_policy();
  int distinct = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto v = sample_pair(x, policy, s, 0);
    distinct += v.x_i != v.x_j;
  }
  EXPECT_GE(distinct, 99);
}

TEST(Augment, RejectsOutOfRangeInputAndBadSpecs) {
  Tensor x({3, 4, 4}, 0.5f);
  x[0] = 1.5f;
  EXPECT_THROW(sample_pair(x, default_policy(), 1, 0), std::invalid_argument);
  TransformSpec t;
  t.probability = 1.2;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  EXPECT_EQ(parse_kind("sobel"), Kind::Sobel);
  EXPECT_FALSE(parse_kind("rotate").has_value());
}
