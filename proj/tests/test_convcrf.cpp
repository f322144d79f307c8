#include <gtest/gtest.h>

#include "dclr/convcrf.hpp"
#include "dclr/pipeline.hpp"
#include "support.hpp"

using namespace dclr;
using namespace dclr::convcrf;
using check::random_tensor;

namespace {

BasicTensor<double> prob_map(std::size_t h, std::size_t w, Rng& rng) {
  BasicTensor<double> F({1, 2, h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    const double a = uniform(rng, 0.02, 0.98);
    F[p] = a;
    F[h * w + p] = 1 - a;
  }
  return F;
}

void expect_valid(const BasicTensor<double>& Q) {
  const std::size_t C = Q.dim(1), P = Q.dim(2) * Q.dim(3);
  for (std::size_t p = 0; p < P; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) {
      ASSERT_GE(Q[c * P + p], 0.0);
      s += Q[c * P + p];
    }
    ASSERT_NEAR(s, 1.0, 1e-5);
  }
}

}  // namespace

TEST(Kernel, ScalarExample) {
  BasicTensor<double> f({1, 1, 1, 2}, std::vector<double>{0.0, 1.0});
  const std::vector<double> theta{1.0};
  const auto K = compute_kernel(f, std::span<const double>(theta), 3);
  EXPECT_NEAR(K.at(0, 1, 2, 0, 0), std::exp(-0.5), 1e-12);  // neighbour one column right
  EXPECT_NEAR(K.at(0, 1, 1, 0, 0), 1.0, 1e-12);
  EXPECT_EQ(K.at(0, 0, 1, 0, 0), 0.0);  // out of image
}

TEST(Kernel, ConstantFeaturesAndHugeBandwidthGiveOnes) {
  BasicTensor<double> f({1, 2, 4, 4}, 0.3);
  std::vector<double> theta{1.0, 1.0};
  auto K = compute_kernel(f, std::span<const double>(theta), 3);
  EXPECT_EQ(K.at(0, 1, 1, 2, 2), 1.0);
  EXPECT_EQ(K.at(0, 0, 2, 1, 1), 1.0);
  Rng rng = make_rng(1, "k");
  f = random_tensor<double>({1, 2, 4, 4}, rng);
  theta = {1e9, 1e9};
  K = compute_kernel(f, std::span<const double>(theta), 3);
  EXPECT_NEAR(K.at(0, 2, 0, 1, 2), 1.0, 1e-12);
}

TEST(Kernel, MatchesDirectEvaluation) {
  Rng rng = make_rng(2, "k");
  for (std::size_t k : {3, 5}) {
    const auto f = random_tensor<double>({2, 3, 6, 7}, rng);
    const std::vector<double> theta{0.7, 1.3, 0.4};
    const auto K = compute_kernel(f, std::span<const double>(theta), k);
    EXPECT_LT(K.max_abs_diff(check::kernel_reference(f, theta, k)), 1e-12) << "k " << k;
  }
}

TEST(Kernel, RejectsEvenFilterAndBadBandwidth) {
  BasicTensor<double> f({1, 1, 3, 3});
  std::vector<double> theta{1.0};
  EXPECT_ANY_THROW(compute_kernel(f, std::span<const double>(theta), 4));
  theta = {0.0};
  EXPECT_ANY_THROW(compute_kernel(f, std::span<const double>(theta), 3));
}

TEST(Merge, Examples) {
  Rng rng = make_rng(3, "m");
  const auto g1 = random_tensor<double>({1, 3, 3, 2, 2}, rng), g2 = random_tensor<double>({1, 3, 3, 2, 2}, rng);
  std::vector<BasicTensor<double>> one{g1}, same{g1, g1}, two{g1, g2};
  const std::vector<double> w1{1.0}, half{0.5, 0.5}, w21{2.0, -1.0};
  EXPECT_EQ(merge_kernels<double>(one, w1), g1);
  EXPECT_LT(merge_kernels<double>(same, half).max_abs_diff(g1), 1e-15);
  const auto K = merge_kernels<double>(two, w21);
  for (std::size_t i = 0; i < K.numel(); ++i) EXPECT_NEAR(K[i], 2 * g1[i] - g2[i], 1e-15);
  std::vector<BasicTensor<double>> bad{g1, BasicTensor<double>({1, 5, 5, 2, 2})};
  EXPECT_THROW(merge_kernels<double>(bad, half), ShapeError);
}

TEST(MessagePass, Examples) {
  const BasicTensor<double> F({1, 2, 5, 5}, 0.25);
  EXPECT_EQ(message_pass(BasicTensor<double>({1, 3, 3, 5, 5}), F), BasicTensor<double>(F.shape()));
  const auto Q = message_pass(BasicTensor<double>({1, 3, 3, 5, 5}, 1.0), F);
  EXPECT_NEAR(Q.at(0, 1, 2, 2), 9 * 0.25, 1e-12);
  EXPECT_NEAR(Q.at(0, 0, 0, 0), 4 * 0.25, 1e-12);  // corner sees a 2x2 window

  Rng rng = make_rng(4, "mp");
  const auto K = random_tensor<double>({1, 3, 3, 8, 8}, rng), G = random_tensor<double>({1, 2, 8, 8}, rng);
  EXPECT_LT(message_pass(K, G).max_abs_diff(check::message_reference(K, G)), 1e-5);
  EXPECT_THROW(message_pass(K, BasicTensor<double>({1, 2, 7, 8})), ShapeError);
}

TEST(MessagePass, LinearInF) {
  Rng rng = make_rng(5, "mp");
  const auto K = random_tensor<double>({1, 5, 5, 6, 6}, rng);
  const auto F1 = random_tensor<double>({1, 2, 6, 6}, rng), F2 = random_tensor<double>({1, 2, 6, 6}, rng);
  BasicTensor<double> mix(F1.shape());
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = 0.3 * F1[i] - 1.7 * F2[i];
  const auto a = message_pass(K, mix), q1 = message_pass(K, F1), q2 = message_pass(K, F2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], 0.3 * q1[i] - 1.7 * q2[i], 1e-5);
}

TEST(Refine, FarPixelsDoNotInfluenceOutput) {
  Rng rng = make_rng(6, "loc");
  auto F = prob_map(12, 12, rng);
  const auto image = random_tensor<double>({1, 3, 12, 12}, rng, 0, 1);
  const auto specs = default_kernels();
  const CrfOptions opt{3, 1};
  const auto Q = crf_refine(F, image, std::span<const KernelSpec>(specs), opt);
  F.at(0, 0, 9, 9) = 0.5;
  F.at(0, 1, 9, 9) = 0.5;
  const auto Q2 = crf_refine(F, image, std::span<const KernelSpec>(specs), opt);
  EXPECT_EQ(Q.at(0, 0, 2, 2), Q2.at(0, 0, 2, 2));  // Chebyshev distance 7 > 1
  EXPECT_EQ(Q.at(0, 1, 9, 7), Q2.at(0, 1, 9, 7));  // distance 2
  EXPECT_NE(Q.at(0, 0, 8, 8), Q2.at(0, 0, 8, 8));  // distance 1
}

TEST(Refine, ZeroWeightsSingleIterationIsIdentity) {
  Rng rng = make_rng(7, "id");
  const auto F = prob_map(6, 6, rng);
  const auto image = random_tensor<double>({1, 3, 6, 6}, rng, 0, 1);
  auto specs = default_kernels();
  for (auto& s : specs) s.weight = 0.0;
  const auto Q = crf_refine(F, image, std::span<const KernelSpec>(specs), CrfOptions{5, 1});
  EXPECT_LT(Q.max_abs_diff(F), 1e-12);
}

TEST(Refine, OutputIsValidProbabilityMap) {
  Rng rng = make_rng(8, "valid");
  for (int t = 0; t < 5; ++t) {
    auto F = prob_map(9, 8, rng);
    F.at(0, 0, 1, 1) = 0.0;  // hard zero is allowed
    F.at(0, 1, 1, 1) = 1.0;
    const auto image = random_tensor<double>({1, 3, 9, 8}, rng, 0, 1);
    const auto specs = default_kernels();
    expect_valid(crf_refine(F, image, std::span<const KernelSpec>(specs)));
  }
}

TEST(Refine, RejectsDegenerateMap) {
  Rng rng = make_rng(9, "deg");
  auto F = prob_map(4, 4, rng);
  F.at(0, 0, 2, 2) = F.at(0, 1, 2, 2) = 0.0;
  const auto image = random_tensor<double>({1, 3, 4, 4}, rng, 0, 1);
  const auto specs = default_kernels();
  EXPECT_THROW(crf_refine(F, image, std::span<const KernelSpec>(specs)), std::invalid_argument);
  EXPECT_THROW(crf_refine(prob_map(4, 4, rng), image, std::span<const KernelSpec>(specs), CrfOptions{3, 0}),
               std::invalid_argument);
}

namespace {

// A disc on a contrasting background, with a blocky 4x4 prediction of it.
struct Fixture {
  BasicTensor<double> image, F;
  encoder::LabelMap target;
  Mask truth;
};

Fixture blob_fixture() {
  const std::size_t n = 24;
  Fixture fx{BasicTensor<double>({1, 3, n, n}), BasicTensor<double>({1, 2, n, n}), encoder::LabelMap({1, n, n}),
             Mask({n, n})};
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const bool in = std::hypot(y - 11.3, x - 12.6) < 7.2;
      fx.truth.at(y, x) = in;
      fx.target.at(0, y, x) = in;
      for (std::size_t c = 0; c < 3; ++c) fx.image.at(0, c, y, x) = in ? 0.35 : 0.8;
    }
  for (std::size_t by = 0; by < n; by += 4)
    for (std::size_t bx = 0; bx < n; bx += 4) {
      int in = 0;
      for (std::size_t y = by; y < by + 4; ++y)
        for (std::size_t x = bx; x < bx + 4; ++x) in += fx.truth.at(y, x);
      const double p = 0.15 + 0.7 * in / 16.0;
      for (std::size_t y = by; y < by + 4; ++y)
        for (std::size_t x = bx; x < bx + 4; ++x) {
          fx.F.at(0, 1, y, x) = p;
          fx.F.at(0, 0, y, x) = 1 - p;
        }
    }
  return fx;
}

double dice_of(const BasicTensor<double>& Q, const Mask& truth) {
  return pipeline::dice(pipeline::tumour_mask(BasicTensor<float>::cast(Q)), truth);
}

}  // namespace

TEST(Refine, ImprovesBlockyPrediction) {
  const auto fx = blob_fixture();
  const auto specs = default_kernels();
  const auto Q = crf_refine(fx.F, fx.image, std::span<const KernelSpec>(specs));
  EXPECT_GT(dice_of(Q, fx.truth), dice_of(fx.F, fx.truth));
}

TEST(TrainCrf, ZeroStepsKeepsParameters) {
  const auto fx = blob_fixture();
  const auto specs = default_kernels();
  const auto r = train_crf(fx.F, fx.image, fx.target, std::span<const KernelSpec>(specs), 0, 0.1);
  ASSERT_EQ(r.specs.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(r.specs[s].weight, specs[s].weight);
    for (std::size_t i = 0; i < specs[s].theta.size(); ++i) EXPECT_NEAR(r.specs[s].theta[i], specs[s].theta[i], 1e-12);
  }
  EXPECT_EQ(r.loss_trace.size(), 1u);
}

TEST(TrainCrf, LossTraceNonIncreasingAndNotWorseThanDefaults) {
  const auto fx = blob_fixture();
  const auto specs = default_kernels();
  const auto r = train_crf(fx.F, fx.image, fx.target, std::span<const KernelSpec>(specs), 8, 0.5);
  ASSERT_EQ(r.loss_trace.size(), 9u);
  for (std::size_t i = 1; i < r.loss_trace.size(); ++i) EXPECT_LE(r.loss_trace[i], r.loss_trace[i - 1]);
  const auto before = crf_refine(fx.F, fx.image, std::span<const KernelSpec>(specs));
  const auto after = crf_refine(fx.F, fx.image, std::span<const KernelSpec>(r.specs));
  EXPECT_GE(dice_of(after, fx.truth), dice_of(before, fx.truth));
}

TEST(TrainCrf, RejectsMismatchedTarget) {
  const auto fx = blob_fixture();
  const auto specs = default_kernels();
  EXPECT_THROW(train_crf(fx.F, fx.image, encoder::LabelMap({1, 5, 5}), std::span<const KernelSpec>(specs), 1, 0.1),
               ShapeError);
}
