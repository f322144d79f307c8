#include <gtest/gtest.h>

#include <numeric>

#include "dclr/contrastive.hpp"
#include "support.hpp"

using namespace dclr;
using namespace dclr::contrastive;

namespace {

double loss(const BasicTensor<double>& z, double tau) {
  const auto p = adjacent_pairing(z.dim(0));
  return nt_xent_value(z, std::span<const std::size_t>(p), tau);
}

std::vector<std::vector<double>> rows(const BasicTensor<double>& z) {
  std::vector<std::vector<double>> r(z.dim(0), std::vector<double>(z.dim(1)));
  for (std::size_t i = 0; i < z.dim(0); ++i)
    for (std::size_t j = 0; j < z.dim(1); ++j) r[i][j] = z.at(i, j);
  return r;
}

}  // namespace

TEST(NtXent, MatchesBruteForceOracle) {
  Rng rng = make_rng(1, "ntxent");
  for (int trial = 0; trial < 50; ++trial)
    for (double tau : {0.1, 0.5, 1.0}) {
      const std::size_t n = 4 + 2 * uniform_index(rng, 3);  // 2b in {4, 6, 8}
      const auto z = check::random_tensor<double>({n, 7}, rng);
      const auto p = adjacent_pairing(n);
      EXPECT_NEAR(loss(z, tau), check::nt_xent_reference(rows(z), p, tau), 1e-5);
    }
}

TEST(NtXent, CollapsedEmbeddingsGiveLogTwoBMinusOne) {
  for (std::size_t b : {2, 4, 8})
    for (double tau : {0.1, 0.5, 1.0}) {
      BasicTensor<double> z({2 * b, 3});
      for (std::size_t i = 0; i < 2 * b; ++i) z.at(i, 0) = 1, z.at(i, 1) = 2, z.at(i, 2) = -0.5;
      EXPECT_NEAR(loss(z, tau), std::log(2.0 * b - 1), 1e-12) << "b " << b;
    }
  BasicTensor<double> z({4, 2}, 1.0);
  EXPECT_NEAR(loss(z, 0.5), 1.09861, 1e-5);
}

TEST(NtXent, OrthogonalPairsWorkedExample) {
  // Positives identical, across pairs orthogonal: each term is -log(e / (e + 2)).
  BasicTensor<double> z({4, 2}, std::vector<double>{1, 0, 1, 0, 0, 1, 0, 1});
  EXPECT_NEAR(loss(z, 1.0), 0.55144, 1e-5);
  EXPECT_NEAR(loss(z, 1.0), -std::log(std::exp(1.0) / (std::exp(1.0) + 2)), 1e-12);
}

TEST(NtXent, ScaleInvariant) {
  Rng rng = make_rng(2, "ntxent");
  const auto z = check::random_tensor<double>({6, 5}, rng);
  auto scaled = z;
  for (auto& v : scaled.data()) v *= 37.5;
  EXPECT_NEAR(loss(scaled, 0.5), loss(z, 0.5), 1e-12);
}

TEST(NtXent, InvariantToPermutingSourceSamples) {
  Rng rng = make_rng(3, "ntxent");
  const auto z = check::random_tensor<double>({8, 4}, rng);
  const std::size_t order[4] = {2, 0, 3, 1};
  BasicTensor<double> p(z.shape());
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t j = 0; j < 4; ++j) p.at(2 * m + v, j) = z.at(2 * order[m] + v, j);
  EXPECT_NEAR(loss(p, 0.5), loss(z, 0.5), 1e-12);
}

TEST(NtXent, MovingPositivesTogetherLowersLoss) {
  Rng rng = make_rng(4, "ntxent");
  auto z = check::random_tensor<double>({6, 4}, rng);
  double prev = loss(z, 0.5);
  for (int step = 0; step < 5; ++step) {
    for (std::size_t j = 0; j < 4; ++j) z.at(1, j) = 0.5 * (z.at(1, j) + z.at(0, j));
    const double now = loss(z, 0.5);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(NtXent, RejectsBadInputs) {
  BasicTensor<double> z({4, 2}, 1.0);
  z.at(2, 0) = z.at(2, 1) = 0;
  EXPECT_ANY_THROW(loss(z, 0.5));
  const std::vector<std::size_t> bad{1, 0, 2, 3};
  EXPECT_ANY_THROW(nt_xent_value(BasicTensor<double>({4, 2}, 1.0), std::span<const std::size_t>(bad), 0.5));
  EXPECT_ANY_THROW(loss(BasicTensor<double>({4, 2}, 1.0), 0.0));
}

TEST(Cosine, ValuesAndZeroNorm) {
  const std::vector<double> a{1, 0}, b{0, 2}, c{-3, 0}, zero{0, 0};
  EXPECT_EQ(cosine_similarity<double>(a, b), 0.0);
  EXPECT_EQ(cosine_similarity<double>(a, c), -1.0);
  EXPECT_THROW(cosine_similarity<double>(a, zero), std::domain_error);
}

TEST(Batch, PairsAdjacentViewsAndRejectsSingleSample) {
  Tensor s({3, 16, 16}, 0.5f);
  std::vector<Tensor> samples{s, s, s};
  std::vector<std::uint64_t> ids{0, 1, 2};
  const auto batch = build_batch(samples, ids, augment::default_policy(8), 3);
  EXPECT_EQ(batch.views.shape(), (Shape{6, 3, 8, 8}));
  EXPECT_EQ(batch.num_views(), 6u);
  EXPECT_EQ(batch.negatives_per_view(), 4u);
  EXPECT_EQ(batch.partner, (std::vector<std::size_t>{1, 0, 3, 2, 5, 4}));
  EXPECT_THROW(build_batch(std::span<const Tensor>(samples).first(1), std::span<const std::uint64_t>(ids).first(1),
                           augment::default_policy(8), 3),
               std::invalid_argument);
}
