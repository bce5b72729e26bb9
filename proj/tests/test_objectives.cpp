#include <gtest/gtest.h>

#include <cmath>

#include "dgvae/objectives.hpp"

namespace ad = dgvae::ad;
namespace dg = dgvae::dg;
namespace dist = dgvae::dist;
namespace obj = dgvae::obj;
using dgvae::Rng;

namespace {

dg::PosteriorBatch gaussian(ad::Var mu, ad::Var ls) {
  dg::PosteriorBatch b;
  b.mu = mu;
  b.log_sigma = ls;
  b.prior = {dist::PriorKind::kStandardNormal, mu.dim(1)};
  return b;
}

dg::PosteriorBatch constant_batch(ad::Tape& t, std::size_t B, std::size_t D, std::vector<double> mu,
                                  std::vector<double> ls) {
  return gaussian(ad::constant(t, {B, D}, std::move(mu)), ad::constant(t, {B, D}, std::move(ls)));
}

double closed_kl_mean(const std::vector<double>& mu, const std::vector<double>& ls, std::size_t D) {
  double s = 0.0;
  const std::size_t B = mu.size() / D;
  for (std::size_t n = 0; n < B; ++n)
    s += dist::gaussian_kl_to_standard({{mu.begin() + n * D, mu.begin() + (n + 1) * D},
                                        {ls.begin() + n * D, ls.begin() + (n + 1) * D}});
  return s / static_cast<double>(B);
}

// Single-kappa KL for Dim=1 posterior with unit sigma: 0.5 mu^2.
std::vector<double> mu_for_kl(double kl, std::size_t B) { return std::vector<double>(B, std::sqrt(2.0 * kl)); }

}  // namespace

TEST(Objectives, ParseKindListsValidKinds) {
  EXPECT_EQ(obj::parse_kind("dg-marginal"), obj::Kind::kDgMarginal);
  for (const auto& name : obj::kind_names()) EXPECT_STREQ(obj::kind_name(obj::parse_kind(name)), name.c_str());
  try {
    obj::parse_kind("wae");
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (const auto& name : obj::kind_names()) EXPECT_NE(msg.find(name), std::string::npos) << msg;
  }
}

TEST(Objectives, ConfigValidation) {
  obj::ObjectiveConfig c;
  EXPECT_NO_THROW(c.validate());
  c.beta = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.gamma = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.aggregation_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Objectives, ReconstructionTermIsBatchMean) {
  ad::Tape t;
  EXPECT_EQ(obj::reconstruction_term(ad::constant(t, {3}, {0.0, 0.0, 0.0})).item(), 0.0);
  EXPECT_DOUBLE_EQ(obj::reconstruction_term(ad::constant(t, {2}, {-1.0, -3.0})).item(), -2.0);
  EXPECT_THROW(obj::reconstruction_term(ad::constant(t, {0}, {})), std::invalid_argument);
}

TEST(Objectives, ElboExamples) {
  ad::Tape t;
  auto prior = constant_batch(t, 3, 2, std::vector<double>(6, 0.0), std::vector<double>(6, 0.0));
  auto perfect = ad::constant(t, 0.0);
  EXPECT_EQ(obj::elbo_loss(prior, perfect, 1.0).total.item(), 0.0);

  std::vector<double> mu{0.3, -0.2, 1.0, 0.5, -0.7, 0.1}, ls{0.1, -0.5, 0.2, 0.0, -0.3, 0.4};
  auto b = constant_batch(t, 3, 2, mu, ls);
  auto recon = ad::constant(t, -7.25);
  EXPECT_EQ(obj::elbo_loss(b, recon, 0.0).total.item(), 7.25);
  auto l = obj::elbo_loss(b, recon, 0.6);
  const double kl = closed_kl_mean(mu, ls, 2);
  EXPECT_NEAR(l.regularizer, kl, 1e-12);
  EXPECT_NEAR(l.total.item(), 7.25 + 0.6 * kl, 1e-12);
  EXPECT_EQ(l.total.item(), -l.reconstruction + l.anneal_weight * l.regularizer);
}

TEST(Objectives, BetaScaling) {
  ad::Tape t;
  std::vector<double> mu{0.3, -0.2, 1.0, 0.5}, ls{0.1, -0.5, 0.2, 0.0};
  auto b = constant_batch(t, 2, 2, mu, ls);
  auto recon = ad::constant(t, -2.0);
  const auto elbo = obj::elbo_loss(b, recon, 1.0);
  EXPECT_EQ(obj::beta_loss(b, recon, 1.0, 1.0).total.item(), elbo.total.item());
  EXPECT_EQ(obj::beta_loss(b, recon, 0.0, 1.0).total.item(), 2.0);
  EXPECT_EQ(obj::beta_loss(b, recon, 0.4, 1.0).regularizer, 0.4 * elbo.regularizer);
}

TEST(Objectives, FreeBitsHinge) {
  ad::Tape t;
  auto mu_inactive = ad::parameter(t, {2, 1}, mu_for_kl(2.0, 2));
  auto ls = ad::parameter(t, {2, 1}, {0.0, 0.0});
  auto recon = ad::constant(t, 0.0);
  auto inactive = obj::freebits_loss(gaussian(mu_inactive, ls), recon, 4.0, false, 1.0);
  EXPECT_DOUBLE_EQ(inactive.regularizer, 4.0);
  t.backward(inactive.total.id());
  for (double g : mu_inactive.grad()) EXPECT_EQ(g, 0.0);

  ad::Tape t2;
  auto mu_active = ad::parameter(t2, {2, 1}, mu_for_kl(10.0, 2));
  auto ls2 = ad::parameter(t2, {2, 1}, {0.0, 0.0});
  auto recon2 = ad::constant(t2, 0.0);
  auto active = obj::freebits_loss(gaussian(mu_active, ls2), recon2, 4.0, false, 1.0);
  auto elbo = obj::elbo_loss(gaussian(mu_active, ls2), recon2, 1.0);
  EXPECT_NEAR(active.total.item(), elbo.total.item(), 1e-12);
}

TEST(Objectives, FreeBitsKinkTakesActiveBranch) {
  ad::Tape t;
  auto mu = ad::parameter(t, {1, 1}, {2.0});
  auto ls = ad::parameter(t, {1, 1}, {0.0});
  const double kl = 0.5 * 2.0 * 2.0;
  auto recon = ad::constant(t, 0.0);
  auto at = obj::freebits_loss(gaussian(mu, ls), recon, kl, false, 1.0);
  EXPECT_EQ(at.regularizer, kl);
  t.backward(at.total.id());
  EXPECT_DOUBLE_EQ(mu.grad()[0], 2.0);
  for (double eps : {1e-9, -1e-9}) {
    ad::Tape u;
    auto b = constant_batch(u, 1, 1, {2.0}, {0.0});
    EXPECT_NEAR(obj::freebits_loss(b, ad::constant(u, 0.0), kl + eps, false, 1.0).regularizer, kl, 2e-9);
  }
}

TEST(Objectives, FreeBitsMonotoneInTarget) {
  ad::Tape t;
  auto b = constant_batch(t, 2, 2, {0.5, -1.0, 2.0, 0.1}, {-0.2, 0.3, 0.0, -1.0});
  auto recon = ad::constant(t, -1.0);
  for (bool per_dim : {false, true}) {
    double prev = -1.0;
    for (double lambda = 0.0; lambda <= 10.0; lambda += 0.5) {
      const double r = obj::freebits_loss(b, recon, lambda, per_dim, 1.0).regularizer;
      EXPECT_GE(r, prev);
      prev = r;
    }
  }
}

TEST(Objectives, BnConstantBatchGivesBias) {
  ad::Tape t;
  auto mu = ad::constant(t, {4, 2}, {0.7, -1.0, 0.7, -1.0, 0.7, -1.0, 0.7, -1.0});
  auto bias = ad::constant(t, {2}, {0.25, -0.5});
  obj::BnStats stats(2);
  auto out = obj::bn_transform(mu, bias, 1.3, stats, true);
  for (std::size_t n = 0; n < 4; ++n) {
    EXPECT_NEAR(out.values()[n * 2], 0.25, 1e-12);
    EXPECT_NEAR(out.values()[n * 2 + 1], -0.5, 1e-12);
  }
}

TEST(Objectives, BnStandardizedBatchIsIdentity) {
  ad::Tape t;
  auto mu = ad::constant(t, {4, 1}, {-1.0, 1.0, -1.0, 1.0});
  auto bias = ad::constant(t, {1}, {0.3});
  obj::BnStats stats(1);
  auto out = obj::bn_transform(mu, bias, 1.0, stats, true);
  for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(out.values()[n], mu.values()[n] + 0.3, 1e-6);
}

TEST(Objectives, BnVarianceIsGammaSquared) {
  Rng rng(1);
  for (double gamma : {0.6, 0.9, 1.2, 1.8}) {
    ad::Tape t;
    std::vector<double> v(32 * 3);
    for (double& x : v) x = 3.0 * rng.normal() + 1.0;
    obj::BnStats stats(3);
    auto out = obj::bn_transform(ad::constant(t, {32, 3}, v), ad::constant(t, {3}, {0.1, 0.2, 0.3}), gamma, stats, true);
    for (std::size_t d = 0; d < 3; ++d) {
      double m = 0.0, s = 0.0;
      for (std::size_t n = 0; n < 32; ++n) m += out.values()[n * 3 + d] / 32.0;
      for (std::size_t n = 0; n < 32; ++n) s += std::pow(out.values()[n * 3 + d] - m, 2) / 32.0;
      EXPECT_NEAR(s, gamma * gamma, 1e-6);
    }
  }
}

TEST(Objectives, BnEvalUsesRunningStatistics) {
  ad::Tape t;
  obj::BnStats stats(1);
  auto bias = ad::constant(t, {1}, {0.0});
  obj::bn_transform(ad::constant(t, {2, 1}, {1.0, 3.0}), bias, 1.0, stats, true);
  EXPECT_NEAR(stats.running_mean[0], 0.2, 1e-15);
  EXPECT_NEAR(stats.running_var[0], 0.9 + 0.1 * 1.0, 1e-15);
  auto out = obj::bn_transform(ad::constant(t, {1, 1}, {0.2}), bias, 2.0, stats, false);
  EXPECT_NEAR(out.item(), 0.0, 1e-12);
  EXPECT_THROW(obj::bn_transform(ad::constant(t, {1, 1}, {0.2}), bias, 2.0, stats, true), std::invalid_argument);
}

TEST(Objectives, DgSingletonSubsetsAreMonteCarloElbo) {
  ad::Tape t;
  Rng rng(2);
  auto b = constant_batch(t, 6, 2, {0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0, 0.0, 0.3},
                          {-0.1, -0.2, 0.0, -0.5, 0.3, 0.1, -0.4, 0.0, 0.2, -0.3, 0.1, 0.0});
  auto s = dg::draw_samples(b, 1, rng);
  auto plan = dg::split_subsets(6, 1, rng);
  const double expected = dg::per_datapoint_mc_kl(b, s).item();
  EXPECT_NEAR(obj::dg_regularizer(b, s, plan, obj::DgVariant::kJoint).item(), expected, 1e-12);
  EXPECT_NEAR(obj::dg_regularizer(b, s, plan, obj::DgVariant::kMarginal).item(), expected, 1e-12);
}

TEST(Objectives, DgPriorBatchHasZeroRegularizer) {
  ad::Tape t;
  Rng rng(3);
  auto b = constant_batch(t, 8, 2, std::vector<double>(16, 0.0), std::vector<double>(16, 0.0));
  auto s = dg::draw_samples(b, 1, rng);
  for (std::size_t agg : {1u, 4u, 8u}) {
    auto plan = dg::split_subsets(8, agg, rng);
    EXPECT_EQ(obj::dg_regularizer(b, s, plan, obj::DgVariant::kJoint).item(), 0.0);
    EXPECT_EQ(obj::dg_regularizer(b, s, plan, obj::DgVariant::kMarginal).item(), 0.0);
  }
}

TEST(Objectives, DgEqualsKlMinusMutualInformation) {
  ad::Tape t;
  Rng rng(4);
  auto b = constant_batch(t, 2, 2, {0.5, -1.0, -0.4, 0.9}, {-0.3, 0.2, 0.1, -0.6});
  auto s = dg::draw_samples(b, 1, rng);
  auto plan = dg::split_subsets(2, 2, rng);
  const double reg = obj::dg_regularizer(b, s, plan, obj::DgVariant::kJoint).item();
  const double kl = dg::per_datapoint_mc_kl(b, s).item();
  const double mi = dg::mi_estimate_from_samples(b, s, false).item();
  EXPECT_LE(std::abs(reg - (kl - mi)), 1e-12 * std::abs(kl));
  EXPECT_LE(std::abs(reg + mi - kl), 1e-12 * std::abs(kl));
}

TEST(Objectives, DgInvariantUnderBatchPermutation) {
  ad::Tape t;
  Rng rng(5);
  std::vector<double> mu(10 * 3), ls(10 * 3), z(10 * 3);
  for (auto* v : {&mu, &ls, &z})
    for (double& x : *v) x = rng.normal();
  std::vector<std::size_t> perm{3, 7, 0, 9, 1, 4, 8, 2, 6, 5};
  std::vector<double> mu_p, ls_p, z_p;
  for (std::size_t n : perm)
    for (std::size_t d = 0; d < 3; ++d) {
      mu_p.push_back(mu[n * 3 + d]);
      ls_p.push_back(ls[n * 3 + d]);
      z_p.push_back(z[n * 3 + d]);
    }
  auto b1 = constant_batch(t, 10, 3, mu, ls);
  auto b2 = constant_batch(t, 10, 3, mu_p, ls_p);
  dg::StratifiedSamples s1{ad::constant(t, {10, 3}, z), 1}, s2{ad::constant(t, {10, 3}, z_p), 1};
  auto p1 = dg::split_subsets(10, 10, rng), p2 = dg::split_subsets(10, 10, rng);
  for (auto variant : {obj::DgVariant::kJoint, obj::DgVariant::kMarginal})
    EXPECT_NEAR(obj::dg_regularizer(b1, s1, p1, variant).item(), obj::dg_regularizer(b2, s2, p2, variant).item(),
                1e-12);
}

TEST(Objectives, DgMarginalRejectsVmf) {
  ad::Tape t;
  dg::PosteriorBatch b;
  b.family = dist::Family::kVmf;
  b.mu = ad::constant(t, {2, 2}, {1, 0, 0, 1});
  b.kappa = 5.0;
  b.prior = {dist::PriorKind::kUniformSphere, 2};
  Rng rng(6);
  auto s = dg::draw_samples(b, 1, rng);
  auto plan = dg::split_subsets(2, 2, rng);
  EXPECT_THROW(obj::dg_regularizer(b, s, plan, obj::DgVariant::kMarginal), std::invalid_argument);
  EXPECT_NO_THROW(obj::dg_regularizer(b, s, plan, obj::DgVariant::kJoint));
}

TEST(Objectives, AnnealingSchedules) {
  obj::Annealing none;
  EXPECT_EQ(obj::anneal_weight(none, 0, 10), 1.0);
  EXPECT_EQ(obj::anneal_weight(none, 12345, 10), 1.0);
  obj::Annealing linear{obj::Annealing::Mode::kLinear, 10.0};
  EXPECT_DOUBLE_EQ(obj::anneal_weight(linear, 50, 10), 0.5);
  EXPECT_DOUBLE_EQ(obj::anneal_weight(linear, 500, 10), 1.0);
  obj::Annealing cyclic{obj::Annealing::Mode::kCyclic, 10.0, 20.0, 10.0};
  EXPECT_DOUBLE_EQ(obj::anneal_weight(cyclic, 250, 10), 0.5);
  EXPECT_DOUBLE_EQ(obj::anneal_weight(cyclic, 150, 10), 1.0);
  EXPECT_DOUBLE_EQ(obj::anneal_weight(cyclic, 200, 10), 0.0);
}

TEST(Objectives, EveryKindPassesGradcheck) {
  Rng init(7);
  std::vector<ad::LeafPoint> point{{{4, 2}, {}}, {{4, 2}, {}}, {{2}, {0.05, -0.1}}};
  for (int i = 0; i < 8; ++i) {
    point[0].values.push_back(0.8 * init.normal());
    point[1].values.push_back(-0.4 + 0.3 * init.normal());
  }
  for (const auto& name : obj::kind_names()) {
    obj::ObjectiveConfig config;
    config.kind = obj::parse_kind(name);
    config.beta = 0.4;
    config.lambda_kl = 0.3;
    config.gamma = 1.2;
    config.kappa = 5.0;
    config.aggregation_size = name == "dg-marginal" ? 2 : 4;
    auto f = [config](ad::Tape& t, std::span<const ad::Var> l) {
      Rng rng(8);
      dg::PosteriorBatch b;
      if (obj::uses_vmf(config.kind)) {
        b.family = dist::Family::kVmf;
        b.mu = dist::normalize_rows(l[0]);
        b.kappa = config.kappa;
        b.prior = {dist::PriorKind::kUniformSphere, 2};
      } else {
        b.mu = l[0];
        if (config.kind == obj::Kind::kBn) {
          obj::BnStats stats(2);
          b.mu = obj::bn_transform(l[0], l[2], config.gamma, stats, true);
        }
        b.log_sigma = l[1];
        b.prior = {dist::PriorKind::kStandardNormal, 2};
      }
      auto s = dg::draw_samples(b, 1, rng);
      auto target = ad::constant(t, {1, 2}, {0.3, -0.2});
      auto loglik = ad::scale(ad::sum(ad::square(s.z - target), 1), -1.0);
      auto loss = obj::objective_loss(config, b, s, obj::reconstruction_term(loglik), 0.7, rng);
      return loss.total;
    };
    EXPECT_LT(ad::gradcheck(f, point), 1e-4) << name;
  }
}
