#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "dgvae/densitygap.hpp"
#include "oracles.hpp"

namespace ad = dgvae::ad;
namespace dg = dgvae::dg;
namespace dist = dgvae::dist;
using dgvae::Rng;

namespace {

dg::PosteriorBatch gaussian_batch(ad::Tape& t, std::size_t B, std::size_t D, std::vector<double> mu,
                                  std::vector<double> ls) {
  dg::PosteriorBatch b;
  b.family = dist::Family::kGaussian;
  b.mu = ad::constant(t, {B, D}, std::move(mu));
  b.log_sigma = ad::constant(t, {B, D}, std::move(ls));
  b.prior = {dist::PriorKind::kStandardNormal, D};
  return b;
}

dg::PosteriorBatch random_batch(ad::Tape& t, std::size_t B, std::size_t D, Rng& rng, double spread = 1.0) {
  std::vector<double> mu(B * D), ls(B * D);
  for (double& v : mu) v = spread * rng.normal();
  for (double& v : ls) v = -1.0 + 0.5 * rng.normal();
  return gaussian_batch(t, B, D, mu, ls);
}

double mean_of(ad::Var v) {
  double s = 0.0;
  for (double x : v.values()) s += x;
  return s / static_cast<double>(v.values().size());
}

}  // namespace

TEST(DensityGap, ZeroWhenPosteriorsEqualPrior) {
  ad::Tape t;
  auto b = gaussian_batch(t, 4, 3, std::vector<double>(12, 0.0), std::vector<double>(12, 0.0));
  Rng rng(1);
  std::vector<double> z(30);
  for (double& v : z) v = 2.0 * rng.normal();
  auto gap = dg::density_gap_at(b, ad::constant(t, {10, 3}, z));
  for (double g : gap.values()) EXPECT_EQ(g, 0.0);
}

TEST(DensityGap, SingleDatapointIsLogRatio) {
  ad::Tape t;
  dist::GaussianPosterior p{{0.4, -1.2}, {-0.3, 0.2}};
  auto b = gaussian_batch(t, 1, 2, p.mu, p.log_sigma);
  std::vector<double> z{0.1, 0.7};
  auto gap = dg::density_gap_at(b, ad::constant(t, {1, 2}, z));
  EXPECT_NEAR(gap.item(), dist::gaussian_log_pdf(p, z) - dist::standard_normal_log_pdf(z), 1e-13);
}

TEST(DensityGap, SymmetricPairAtOrigin) {
  ad::Tape t;
  auto b = gaussian_batch(t, 2, 1, {1.0, -1.0}, {0.0, 0.0});
  auto gap = dg::density_gap_at(b, ad::constant(t, {1, 1}, {0.0}));
  const double direct = std::log(0.5 * (oracle::normal_pdf(0, 1, 1) + oracle::normal_pdf(0, -1, 1))) -
                        std::log(oracle::normal_pdf(0, 0, 1));
  EXPECT_NEAR(gap.item(), -0.5, 1e-14);
  EXPECT_NEAR(gap.item(), direct, 1e-14);
}

TEST(DensityGap, SupportViolationRejected) {
  ad::Tape t;
  dg::PosteriorBatch b;
  b.family = dist::Family::kVmf;
  b.mu = ad::constant(t, {1, 2}, {1.0, 0.0});
  b.kappa = 2.0;
  b.prior = {dist::PriorKind::kUniformSphere, 2};
  EXPECT_THROW(dg::density_gap_at(b, ad::constant(t, {1, 2}, {0.5, 0.5})), std::invalid_argument);
  EXPECT_NO_THROW(dg::density_gap_at(b, ad::constant(t, {1, 2}, {0.0, 1.0})));
  EXPECT_THROW(dg::marginal_density_gap_at(b, 0, ad::constant(t, {1}, {0.0})), std::invalid_argument);
}

TEST(DensityGap, VmfUniformBatchHasZeroGap) {
  ad::Tape t;
  dg::PosteriorBatch b;
  b.family = dist::Family::kVmf;
  b.mu = ad::constant(t, {3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  b.kappa = 0.0;
  b.prior = {dist::PriorKind::kUniformSphere, 3};
  Rng rng(2);
  auto s = dg::draw_samples(b, 4, rng);
  for (double g : dg::density_gap_at(b, s.z).values()) EXPECT_EQ(g, 0.0);
}

TEST(MonteCarloKl, PriorBatchEstimateIsZero) {
  ad::Tape t;
  auto b = gaussian_batch(t, 10, 2, std::vector<double>(20, 0.0), std::vector<double>(20, 0.0));
  Rng rng(3);
  auto s = dg::draw_samples(b, 1000, rng);
  auto gap = dg::density_gap_at(b, s.z);
  EXPECT_LE(std::abs(dg::mc_kl_aggregated(b, s).item()), 3.0 * dg::standard_error(gap) + 1e-300);
  EXPECT_EQ(dg::mc_kl_aggregated(b, s).item(), 0.0);
}

TEST(MonteCarloKl, TwoComponentMatchesQuadrature) {
  ad::Tape t;
  auto b = gaussian_batch(t, 2, 1, {1.0, -1.0}, {std::log(0.5), std::log(0.5)});
  Rng rng(4);
  auto s = dg::draw_samples(b, 50000, rng);
  const double ref = oracle::mixture_kl_1d({1.0, -1.0}, {0.5, 0.5});
  EXPECT_NEAR(dg::mc_kl_aggregated(b, s).item(), ref, 0.02);
}

TEST(MonteCarloKl, SampleMismatchRejected) {
  ad::Tape t;
  auto b = gaussian_batch(t, 2, 1, {1.0, -1.0}, {0.0, 0.0});
  dg::StratifiedSamples s{ad::constant(t, {3, 1}, {0.0, 0.0, 0.0}), 1};
  EXPECT_THROW(dg::mc_kl_aggregated(b, s), std::invalid_argument);
}

TEST(MarginalDensityGap, Examples) {
  ad::Tape t;
  auto standard = gaussian_batch(t, 3, 2, std::vector<double>(6, 0.0), std::vector<double>(6, 0.0));
  auto zi = ad::constant(t, {4}, {-2.0, -0.1, 0.0, 3.0});
  for (double g : dg::marginal_density_gap_at(standard, 1, zi).values()) EXPECT_EQ(g, 0.0);

  auto pair = gaussian_batch(t, 2, 2, {1.0, 5.0, -1.0, 5.0}, {0.0, 0.3, 0.0, 0.3});
  EXPECT_NEAR(dg::marginal_density_gap_at(pair, 0, ad::constant(t, {1}, {0.0})).item(), -0.5, 1e-14);
  EXPECT_THROW(dg::marginal_density_gap_at(pair, 2, zi), std::out_of_range);

  Rng rng(5);
  auto one = random_batch(t, 5, 1, rng);
  auto z = ad::constant(t, {6, 1}, {-1.0, -0.5, 0.0, 0.3, 1.1, 2.0});
  auto joint = dg::density_gap_at(one, z);
  auto marg = dg::marginal_density_gap_at(one, 0, ad::reshape(z, {6}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(joint.values()[i], marg.values()[i]);
}

TEST(MarginalKl, OneDimensionEqualsJointBitExact) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    ad::Tape t;
    auto b = random_batch(t, 7, 1, rng);
    auto s = dg::draw_samples(b, 3, rng);
    EXPECT_EQ(dg::mc_kl_marginal(b, s).item(), dg::mc_kl_aggregated(b, s).item());
  }
}

TEST(MarginalKl, CollapsedBatchMatchesClosedForm) {
  ad::Tape t;
  const std::vector<double> c{0.6, -0.4, 0.0}, ls{-0.2, 0.3, 0.0};
  std::vector<double> mu, lsig;
  for (int n = 0; n < 8; ++n) {
    mu.insert(mu.end(), c.begin(), c.end());
    lsig.insert(lsig.end(), ls.begin(), ls.end());
  }
  auto b = gaussian_batch(t, 8, 3, mu, lsig);
  Rng rng(7);
  auto s = dg::draw_samples(b, 2000, rng);
  auto gaps = dg::marginal_density_gap(b, s.z);
  for (std::size_t d = 0; d < 3; ++d) {
    auto col = ad::slice(gaps, 1, d, d + 1);
    auto flat = ad::reshape(col, {col.dim(0)});
    const double closed = dist::gaussian_kl_to_standard({{c[d]}, {ls[d]}});
    EXPECT_LT(std::abs(mean_of(flat) - closed), 3.0 * dg::standard_error(flat) + 1e-12) << d;
  }
}

TEST(MarginalKl, ProductFormAgreesWithJoint) {
  ad::Tape t;
  // Means differ only on dimension 0, so q_B factorizes across dimensions.
  auto b = gaussian_batch(t, 4, 2, {-1.5, 0.3, -0.5, 0.3, 0.5, 0.3, 1.5, 0.3},
                          {-0.7, -0.2, -0.7, -0.2, -0.7, -0.2, -0.7, -0.2});
  Rng rng(8);
  auto s = dg::draw_samples(b, 10000, rng);
  auto joint = dg::density_gap_at(b, s.z);
  auto marg = ad::sum(dg::marginal_density_gap(b, s.z), 1);
  auto diff = joint - marg;
  EXPECT_LT(std::abs(mean_of(diff)), 3.0 * dg::standard_error(diff) + 1e-12);
}

TEST(SplitSubsets, WholeBatch) {
  Rng rng(9);
  auto plan = dg::split_subsets(32, 32, rng);
  ASSERT_EQ(plan.count(), 1u);
  std::set<std::size_t> all(plan.subsets[0].begin(), plan.subsets[0].end());
  EXPECT_EQ(all.size(), 32u);
}

TEST(SplitSubsets, Singletons) {
  Rng rng(10);
  auto plan = dg::split_subsets(32, 1, rng);
  ASSERT_EQ(plan.count(), 32u);
  for (const auto& s : plan.subsets) EXPECT_EQ(s.size(), 1u);
}

TEST(SplitSubsets, RemainderRule) {
  Rng rng(11);
  auto plan = dg::split_subsets(10, 4, rng);
  ASSERT_EQ(plan.count(), 3u);
  EXPECT_EQ(plan.subsets[0].size(), 4u);
  EXPECT_EQ(plan.subsets[1].size(), 4u);
  EXPECT_EQ(plan.subsets[2].size(), 2u);
  auto merged = dg::split_subsets(9, 4, rng);
  ASSERT_EQ(merged.count(), 2u);
  EXPECT_EQ(merged.subsets[1].size(), 5u);
}

TEST(SplitSubsets, PartitionCoversBatch) {
  Rng rng(12);
  for (std::size_t B = 1; B <= 40; ++B)
    for (std::size_t b = 1; b <= B; ++b) {
      auto plan = dg::split_subsets(B, b, rng);
      std::vector<int> seen(B, 0);
      for (std::size_t c = 0; c < plan.count(); ++c)
        for (std::size_t n : plan.subsets[c]) {
          ++seen[n];
          EXPECT_EQ(plan.assignment[n], c);
        }
      for (int v : seen) EXPECT_EQ(v, 1);
      for (const auto& s : plan.subsets)
        if (b > 1) EXPECT_GE(s.size(), std::min<std::size_t>(2, B));
    }
}

TEST(SplitSubsets, ClampsOversizedAggregation) {
  Rng rng(13);
  auto plan = dg::split_subsets(5, 32, rng);
  EXPECT_EQ(plan.aggregation_size, 5u);
  EXPECT_EQ(plan.count(), 1u);
  EXPECT_THROW(dg::split_subsets(5, 0, rng), std::invalid_argument);
}

TEST(SplitSubsets, ReshuffledAcrossCalls) {
  Rng rng(14);
  auto a = dg::split_subsets(16, 4, rng);
  auto b = dg::split_subsets(16, 4, rng);
  EXPECT_NE(a.subsets, b.subsets);
}

TEST(MutualInformation, IdenticalPosteriorsGiveZero) {
  ad::Tape t;
  std::vector<double> mu, ls;
  for (int n = 0; n < 5; ++n) {
    mu.insert(mu.end(), {0.3, -0.8});
    ls.insert(ls.end(), {-0.4, 0.1});
  }
  auto b = gaussian_batch(t, 5, 2, mu, ls);
  Rng rng(15);
  auto s = dg::draw_samples(b, 4, rng);
  for (double v : dg::mi_per_sample(b, s, false).values()) EXPECT_EQ(v, 0.0);
  for (double v : dg::mi_per_sample(b, s, true).values()) EXPECT_EQ(v, 0.0);
}

TEST(MutualInformation, BoundedByLogBatchSize) {
  Rng rng(16);
  for (std::size_t B : {2u, 8u, 32u}) {
    ad::Tape t;
    auto b = random_batch(t, B, 4, rng, 5.0);
    auto s = dg::draw_samples(b, 20, rng);
    auto per = dg::mi_per_sample(b, s, false);
    const double mi = mean_of(per), se = dg::standard_error(per);
    EXPECT_LE(mi, std::log(static_cast<double>(B)) + 3.0 * se + 1e-12);
    EXPECT_GE(mi, -3.0 * se);
  }
}

TEST(MutualInformation, DisjointPairReachesLogTwo) {
  ad::Tape t;
  auto b = gaussian_batch(t, 2, 1, {100.0, -100.0}, {0.0, 0.0});
  Rng rng(17);
  auto s = dg::draw_samples(b, 50000, rng);
  EXPECT_NEAR(dg::mi_estimate_from_samples(b, s, false).item(), std::log(2.0), 0.01);
}

TEST(MutualInformation, HoffmanIdentityOnSharedSamples) {
  Rng rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    ad::Tape t;
    auto b = random_batch(t, 8, 3, rng);
    auto s = dg::draw_samples(b, 2, rng);
    const double lhs = dg::per_datapoint_mc_kl(b, s).item();
    const double rhs = dg::mc_kl_aggregated(b, s).item() + dg::mi_estimate_from_samples(b, s, false).item();
    EXPECT_LE(std::abs(lhs - rhs), 1e-9 * std::abs(lhs));
  }
}

TEST(MutualInformation, MarginalIdentityWithinStandardError) {
  Rng rng(19);
  ad::Tape t;
  auto b = random_batch(t, 8, 3, rng);
  auto s = dg::draw_samples(b, 2000, rng);
  double closed = 0.0;
  const auto mu = b.mu.values(), ls = b.log_sigma.values();
  for (std::size_t n = 0; n < 8; ++n)
    closed += dist::gaussian_kl_to_standard({{mu.begin() + 3 * n, mu.begin() + 3 * n + 3},
                                             {ls.begin() + 3 * n, ls.begin() + 3 * n + 3}}) /
              8.0;
  // Per-sample sum of both Monte Carlo terms, so the SE covers their joint noise.
  auto per = ad::sum(dg::marginal_density_gap(b, s.z), 1) + dg::mi_per_sample(b, s, true);
  EXPECT_LT(std::abs(mean_of(per) - closed), 3.0 * dg::standard_error(per));
  EXPECT_NEAR(mean_of(per), dg::mc_kl_marginal(b, s).item() + dg::mi_estimate_from_samples(b, s, true).item(), 1e-9);
}

TEST(DensityGap, TranslationCovariance) {
  Rng rng(20);
  ad::Tape t;
  const double shift = 0.7;
  std::vector<double> mu{-0.8, 0.1, 0.9}, ls{-0.5, -0.9, -0.3};
  auto b = gaussian_batch(t, 3, 1, mu, ls);
  auto s = dg::draw_samples(b, 30000, rng);
  std::vector<double> mu2 = mu, z2(s.z.values().begin(), s.z.values().end());
  for (double& v : mu2) v += shift;
  for (double& v : z2) v += shift;
  auto b2 = gaussian_batch(t, 3, 1, mu2, ls);
  dg::StratifiedSamples s2{ad::constant(t, {z2.size(), 1}, z2), s.per_point};

  auto mi1 = dg::mi_per_sample(b, s, false), mi2 = dg::mi_per_sample(b2, s2, false);
  for (std::size_t i = 0; i < mi1.values().size(); ++i) EXPECT_NEAR(mi1.values()[i], mi2.values()[i], 1e-9);

  const double quad_delta = mean_of(dg::log_prior(b, s.z) - dg::log_prior(b2, s2.z));
  EXPECT_NEAR(dg::mc_kl_aggregated(b2, s2).item() - dg::mc_kl_aggregated(b, s).item(), quad_delta, 1e-9);
  EXPECT_NEAR(dg::mc_kl_marginal(b2, s2).item() - dg::mc_kl_marginal(b, s).item(), quad_delta, 1e-9);

  std::vector<double> sig;
  for (double v : ls) sig.push_back(std::exp(v));
  auto gap2 = dg::density_gap_at(b2, s2.z);
  EXPECT_LT(std::abs(mean_of(gap2) - oracle::mixture_kl_1d(mu2, sig)), std::max(0.02, 3.0 * dg::standard_error(gap2)));
}

TEST(DensityGap, FiniteAcrossExtremeScales) {
  for (double lsig : {-30.0, -10.0, 0.0, 10.0, 30.0}) {
    ad::Tape t;
    auto b = gaussian_batch(t, 3, 2, {0.5, -0.5, 1.0, 2.0, -3.0, 0.0}, std::vector<double>(6, lsig));
    Rng rng(21);
    auto s = dg::draw_samples(b, 2, rng);
    EXPECT_TRUE(std::isfinite(dg::mc_kl_aggregated(b, s).item())) << lsig;
    EXPECT_TRUE(std::isfinite(dg::mc_kl_marginal(b, s).item())) << lsig;
    EXPECT_TRUE(std::isfinite(dg::mi_estimate_from_samples(b, s, false).item())) << lsig;
  }
}

TEST(DensityGap, LossGradcheck) {
  Rng init(22);
  std::vector<ad::LeafPoint> point{{{3, 2}, {}}, {{3, 2}, {}}};
  for (int i = 0; i < 6; ++i) {
    point[0].values.push_back(init.normal());
    point[1].values.push_back(-0.5 + 0.3 * init.normal());
  }
  for (bool marginal : {false, true}) {
    auto f = [marginal](ad::Tape&, std::span<const ad::Var> l) {
      dg::PosteriorBatch b;
      b.mu = l[0];
      b.log_sigma = l[1];
      b.prior = {dist::PriorKind::kStandardNormal, 2};
      Rng rng(23);
      auto s = dg::draw_samples(b, 2, rng);
      return marginal ? dg::mc_kl_marginal(b, s) : dg::mc_kl_aggregated(b, s);
    };
    EXPECT_LT(ad::gradcheck(f, point), 1e-4) << marginal;
  }
}

TEST(DensityGap, SelectionKeepsRowsAndGradients) {
  ad::Tape t;
  auto x = ad::parameter(t, {3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<std::size_t> idx{2, 0};
  auto y = dg::select_rows(x, idx);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{5, 6, 1, 2}));
  t.backward(ad::sum(y).id());
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 0, 0, 1, 1}));
}
