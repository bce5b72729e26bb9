#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dgvae/metrics.hpp"

namespace dist = dgvae::dist;
namespace metrics = dgvae::metrics;
namespace model = dgvae::model;
using dgvae::kBos;
using dgvae::kEos;
using dgvae::Matrix;
using dgvae::Rng;
using dgvae::Token;
using dgvae::TokenSequence;

namespace {

model::PosteriorDump gaussian_dump(std::size_t n, std::size_t D, std::vector<double> mu, std::vector<double> ls) {
  model::PosteriorDump d;
  d.mu = Matrix(n, D, std::move(mu));
  d.log_sigma = Matrix(n, D, std::move(ls));
  return d;
}

model::PosteriorDump collapsed(std::size_t n, std::size_t D) {
  return gaussian_dump(n, D, std::vector<double>(n * D, 0.0), std::vector<double>(n * D, 0.0));
}

model::PosteriorDump random_dump(std::size_t n, std::size_t D, Rng& rng, double spread = 1.0) {
  std::vector<double> mu(n * D), ls(n * D);
  for (double& v : mu) v = spread * rng.normal();
  for (double& v : ls) v = -1.0 + 0.3 * rng.normal();
  return gaussian_dump(n, D, mu, ls);
}

// x_n = a z + N(0, s^2) noise, z ~ N(0, 1).
struct LinearGaussian {
  double a = 1.5, s = 0.8;
  std::vector<double> x{-1.0, 0.5, 2.0};

  metrics::LogLikelihoodFn fn() const {
    return [this](const Matrix& z, std::span<const std::size_t> owner) {
      std::vector<double> out(z.rows);
      for (std::size_t r = 0; r < z.rows; ++r) {
        const double e = (x[owner[r]] - a * z(r, 0)) / s;
        out[r] = -0.5 * e * e - std::log(s) - 0.5 * dist::kLogTwoPi;
      }
      return out;
    };
  }
  double marginal(std::size_t n) const {
    const double v = a * a + s * s;
    return -0.5 * x[n] * x[n] / v - 0.5 * std::log(v) - 0.5 * dist::kLogTwoPi;
  }
  double mean_marginal() const {
    double m = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n) m += marginal(n) / static_cast<double>(x.size());
    return m;
  }
};

metrics::LogLikelihoodFn constant_loglik(std::vector<double> per_point) {
  return [per_point](const Matrix& z, std::span<const std::size_t> owner) {
    std::vector<double> out(z.rows);
    for (std::size_t r = 0; r < z.rows; ++r) out[r] = per_point[owner[r]];
    return out;
  };
}

TokenSequence random_sequence(Rng& rng, std::size_t max_len, Token lo, Token hi) {
  TokenSequence s;
  const std::size_t len = rng.index(max_len + 1);
  for (std::size_t i = 0; i < len; ++i) s.push_back(lo + static_cast<Token>(rng.index(hi - lo + 1)));
  return s;
}

}  // namespace

TEST(Metrics, KlExamples) {
  EXPECT_EQ(metrics::kl_metric(collapsed(10, 3)), 0.0);
  EXPECT_DOUBLE_EQ(metrics::kl_metric(gaussian_dump(1, 1, {1.0}, {0.0})), 0.5);
  model::PosteriorDump v;
  v.family = dist::Family::kVmf;
  v.kappa = 13.0;
  v.mu = Matrix(2, 3, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
  EXPECT_EQ(metrics::kl_metric(v), dist::vmf_kl_to_uniform(3, 13.0));
}

TEST(Metrics, MiCollapsedIsZero) {
  Rng rng(1);
  auto r = metrics::mi_metric(collapsed(40, 4), 512, 2, rng);
  EXPECT_EQ(r.mi.value, 0.0);
  EXPECT_LE(std::abs(r.mi.value), 3.0 * r.mi.se + 1e-15);
}

TEST(Metrics, MiTwoSeparatedPosteriorsIsLogTwo) {
  Rng rng(2);
  auto r = metrics::mi_metric(gaussian_dump(2, 1, {-50.0, 50.0}, {0.0, 0.0}), 2, 500, rng);
  EXPECT_NEAR(r.mi.value, std::log(2.0), 0.01);
}

TEST(Metrics, MiBoundedByLogChunk) {
  Rng rng(3);
  for (std::size_t chunk : {4u, 16u, 64u}) {
    auto d = random_dump(64, 2, rng, 10.0);
    auto r = metrics::mi_metric(d, chunk, 1, rng);
    EXPECT_LE(r.mi.value, std::log(static_cast<double>(chunk)) + 3.0 * r.mi.se + 1e-12);
  }
}

TEST(Metrics, MiDecompositionOnSharedSamples) {
  Rng rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    auto d = random_dump(30 + rep, 3, rng);
    auto r = metrics::mi_metric(d, 16, 2, rng);
    EXPECT_LE(std::abs(r.mi.value + r.aggregated_kl - r.per_datapoint_kl), 1e-9 * std::abs(r.per_datapoint_kl));
  }
}

TEST(Metrics, ActiveUnits) {
  EXPECT_EQ(metrics::active_units(collapsed(20, 4), 0.01), 0u);
  std::vector<double> mu(20 * 3, 0.0);
  for (std::size_t n = 0; n < 20; ++n) mu[n * 3] = n % 2 ? 1.0 : -1.0;
  auto d = gaussian_dump(20, 3, mu, std::vector<double>(60, 0.0));
  EXPECT_EQ(metrics::active_units(d, 0.01), 1u);
  Rng rng(5);
  auto r = random_dump(50, 6, rng);
  std::size_t prev = 7;
  for (double t = 0.0; t < 3.0; t += 0.1) {
    const auto au = metrics::active_units(r, t);
    EXPECT_LE(au, prev);
    prev = au;
  }
}

TEST(Metrics, ConsistentUnits) {
  EXPECT_EQ(metrics::consistent_units(collapsed(20, 5), 0.1, 0.2), 5u);
  std::vector<double> mu(40 * 2), ls(40 * 2, 0.0);
  for (std::size_t n = 0; n < 40; ++n) mu[n * 2] = mu[n * 2 + 1] = n % 2 ? 1.2 : -1.2;
  EXPECT_EQ(metrics::consistent_units(gaussian_dump(40, 2, mu, ls), 0.1, 0.2), 0u);
  for (double a : {0.1, 0.5, 0.9, 0.99}) {
    std::vector<double> mu2(40 * 2), ls2(40 * 2, 0.5 * std::log(1.0 - a * a));
    for (std::size_t n = 0; n < 40; ++n) mu2[n * 2] = mu2[n * 2 + 1] = n % 2 ? a : -a;
    EXPECT_EQ(metrics::consistent_units(gaussian_dump(40, 2, mu2, ls2), 0.1, 0.2), 2u) << a;
  }
  model::PosteriorDump v;
  v.family = dist::Family::kVmf;
  v.mu = Matrix(1, 2, {1.0, 0.0});
  EXPECT_FALSE(metrics::consistent_units(v, 0.1, 0.2).has_value());
}

TEST(Metrics, PriorLlConstantIntegrand) {
  dist::PriorSpec prior{dist::PriorKind::kStandardNormal, 3};
  std::vector<double> lp{-3.5, -7.25, -1.0};
  for (std::size_t S : {1u, 7u, 128u}) {
    Rng rng(6);
    auto e = metrics::prior_ll(constant_loglik(lp), 3, prior, S, rng);
    EXPECT_EQ(e.value, (lp[0] + lp[1] + lp[2]) / 3.0);
  }
}

TEST(Metrics, PriorLlSingleSampleIsConditional) {
  LinearGaussian toy;
  dist::PriorSpec prior{dist::PriorKind::kStandardNormal, 1};
  Rng a(7), b(7);
  auto e = metrics::prior_ll(toy.fn(), 3, prior, 1, a);
  Matrix z(3, 1);
  for (std::size_t n = 0; n < 3; ++n) z(n, 0) = b.normal();
  std::vector<std::size_t> owner{0, 1, 2};
  auto ll = toy.fn()(z, owner);
  EXPECT_DOUBLE_EQ(e.value, (ll[0] + ll[1] + ll[2]) / 3.0);
}

TEST(Metrics, PriorLlMatchesConjugateMarginal) {
  LinearGaussian toy;
  Rng rng(8);
  auto e = metrics::prior_ll(toy.fn(), 3, {dist::PriorKind::kStandardNormal, 1}, 10000, rng);
  EXPECT_NEAR(e.value, toy.mean_marginal(), 0.05);
}

TEST(Metrics, PostLlMatchesConjugateMarginalAndBoundsElbo) {
  LinearGaussian toy;
  const double v = toy.a * toy.a + toy.s * toy.s;
  std::vector<double> mu, ls;
  for (double x : toy.x) {
    mu.push_back(toy.a * x / v + 0.1);
    ls.push_back(0.5 * std::log(toy.s * toy.s / v) + std::log(1.2));
  }
  auto dump = gaussian_dump(3, 1, mu, ls);
  dist::PriorSpec prior{dist::PriorKind::kStandardNormal, 1};
  Rng rng(9);
  auto e = metrics::post_ll(toy.fn(), dump, prior, 10000, rng);
  EXPECT_NEAR(e.value, toy.mean_marginal(), 0.01);
  auto elbo = metrics::mean_and_se(metrics::single_sample_elbo(toy.fn(), dump, prior, rng));
  EXPECT_GE(e.value, elbo.value - 3.0 * elbo.se);
  auto e128 = metrics::post_ll(toy.fn(), dump, prior, 128, rng);
  EXPECT_GE(e128.value, elbo.value - 3.0 * elbo.se);
}

TEST(Metrics, PostLlEqualsPriorLlWhenCollapsed) {
  std::vector<double> lp{-3.5, -7.25, -1.0, -2.0};
  dist::PriorSpec prior{dist::PriorKind::kStandardNormal, 2};
  Rng rng(10);
  auto pr = metrics::prior_ll(constant_loglik(lp), 4, prior, 64, rng);
  auto po = metrics::post_ll(constant_loglik(lp), collapsed(4, 2), prior, 64, rng);
  EXPECT_EQ(pr.value, po.value);
}

TEST(Metrics, RougeLHandExamples) {
  const TokenSequence a{1, 2, 3, 4}, b{1, 3, 4, 5};
  EXPECT_EQ(metrics::lcs_length(a, b), 3u);
  EXPECT_EQ(metrics::rouge_l_f1(a, b), 0.75);
  EXPECT_EQ(metrics::rouge_l_f1(a, a), 1.0);
  EXPECT_EQ(metrics::rouge_l_f1(TokenSequence{2, 3}, TokenSequence{4, 5, 6}), 0.0);
  EXPECT_EQ(metrics::rouge_l_f1(TokenSequence{}, TokenSequence{}), 1.0);
  EXPECT_EQ(metrics::rouge_l_f1(TokenSequence{}, TokenSequence{3}), 0.0);
  EXPECT_EQ(metrics::rouge_l_f1(TokenSequence{3}, TokenSequence{}), 0.0);
  // LCS 3 of 3 candidate and 5 reference tokens: P = 1, R = 0.6.
  EXPECT_DOUBLE_EQ(metrics::rouge_l_f1(TokenSequence{1, 3, 5}, TokenSequence{1, 2, 3, 4, 5}), 0.75);
  EXPECT_DOUBLE_EQ(metrics::rouge_l_f1(TokenSequence{1, 2, 3}, TokenSequence{3, 2, 1}), 1.0 / 3.0);
  EXPECT_EQ(metrics::lcs_length(TokenSequence{2, 7, 2, 7, 2}, TokenSequence{7, 2, 7}), 3u);
  EXPECT_EQ(metrics::lcs_length(TokenSequence{5, 6, 7, 8, 9}, TokenSequence{9, 5, 8, 6, 7}), 3u);
}

TEST(Metrics, RougeLProperties) {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    auto a = random_sequence(rng, 10, 2, 6), b = random_sequence(rng, 10, 2, 6);
    const double f = metrics::rouge_l_f1(a, b);
    EXPECT_EQ(f, metrics::rouge_l_f1(b, a));
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
    EXPECT_EQ(f == 1.0, a == b);
    EXPECT_EQ(metrics::rouge_l_f1(a, a), 1.0);
  }
}

TEST(Metrics, InterpolationWeightsAreSymmetric) {
  for (std::size_t i = 0; i <= 10; ++i) {
    auto [wa, wb] = metrics::interpolation_weights(i);
    auto [va, vb] = metrics::interpolation_weights(10 - i);
    EXPECT_EQ(wa, vb);
    EXPECT_EQ(wb, va);
  }
  EXPECT_EQ(metrics::interpolation_weights(0).second, 0.0);
  EXPECT_EQ(metrics::interpolation_weights(10).second, 1.0);
  std::vector<double> za{0.6, 0.8, 0.0}, zb{0.0, 0.0, 1.0};
  for (bool slerp : {false, true})
    for (std::size_t i = 0; i <= 10; ++i) {
      auto z = metrics::interpolate_latent(za, zb, i, true, slerp);
      EXPECT_NEAR(z[0] * z[0] + z[1] * z[1] + z[2] * z[2], 1.0, 1e-12);
      EXPECT_EQ(z, metrics::interpolate_latent(zb, za, 10 - i, true, slerp));
    }
}

TEST(Metrics, InterpolationEndpointsAndSymmetry) {
  model::ModelConfig c;
  c.vocab = 8;
  c.embed = 4;
  c.hidden = 6;
  c.latent = 3;
  c.max_len = 10;
  c.init_scale = 1.5;
  Rng rng(12);
  auto params = model::initialize(c, rng);
  for (int i = 0; i < 100; ++i) {
    TokenSequence a{kBos}, b{kBos};
    for (auto s : {&a, &b}) {
      auto body = random_sequence(rng, 6, 2, 7);
      s->insert(s->end(), body.begin(), body.end());
      s->push_back(kEos);
    }
    auto ab = metrics::interpolate(c, params, nullptr, a, b);
    auto ba = metrics::interpolate(c, params, nullptr, b, a);
    ASSERT_EQ(ab.decoded.size(), 11u);
    for (std::size_t k = 0; k <= 10; ++k) {
      EXPECT_EQ(ab.scores[k], ba.scores[10 - k]);
      EXPECT_EQ(ab.lambdas[k], static_cast<double>(k) / 10.0);
      EXPECT_GE(ab.scores[k], 0.0);
      EXPECT_LE(ab.scores[k], 1.0);
    }
    std::vector<TokenSequence> ends{a};
    auto za = model::encode_all(c, params, nullptr, ends);
    EXPECT_EQ(ab.decoded[0], model::greedy_decode(c, params, za.mu, c.max_len)[0]);
  }
}

TEST(Metrics, CollapsedInterpolationIsFlat) {
  model::ModelConfig c;
  c.vocab = 8;
  c.embed = 4;
  c.hidden = 6;
  c.latent = 3;
  c.init_scale = 1.5;
  Rng rng(13);
  auto params = model::initialize(c, rng);
  auto& w = params.at("dec.z.w").values;
  std::fill(w.begin(), w.end(), 0.0);
  auto s = model::greedy_decode(c, params, Matrix(1, 3), c.max_len)[0];
  if (s.back() != kEos) s.push_back(kEos);
  TokenSequence b{kBos, 2, 3, 4, kEos};
  auto r = metrics::interpolate(c, params, nullptr, s, b);
  const double f0 = metrics::rouge_l_f1(model::strip_markers(r.decoded[0]), model::strip_markers(b));
  EXPECT_EQ(r.scores[0], 0.5 * (1.0 + f0));
  for (std::size_t k = 1; k <= 10; ++k) {
    EXPECT_EQ(r.decoded[k], r.decoded[0]);
    EXPECT_EQ(r.scores[k], r.scores[0]);
  }
}

TEST(Metrics, HistogramOfCollapsedEncoderIsStandardNormal) {
  Rng rng(14);
  auto h = metrics::posterior_histograms(collapsed(30, 3), std::nullopt, 100, -4.0, 4.0, rng);
  double mass = 0.0;
  for (std::size_t a = 0; a < h.bins; ++a)
    for (std::size_t b = 0; b < h.bins; ++b) {
      const double x = h.cell_center(a), y = h.cell_center(b);
      const double want = std::exp(-0.5 * (x * x + y * y)) / (2.0 * std::numbers::pi);
      EXPECT_NEAR(h.aggregated[a * 100 + b] / want, 1.0, 0.02);
      mass += h.aggregated[a * 100 + b] * h.cell_area();
    }
  const double inside = std::pow(std::erf(4.0 / std::numbers::sqrt2), 2);
  EXPECT_NEAR(mass, inside, 1e-3);
}

TEST(Metrics, HistogramMassMatchesMixtureCdf) {
  auto d = gaussian_dump(3, 2, {0.5, -1.0, 3.5, 0.0, -2.0, 2.0}, {-1.0, 0.0, 0.2, -0.5, 0.0, 0.3});
  Rng rng(15);
  auto h = metrics::posterior_histograms(d, std::make_pair<std::size_t, std::size_t>(0, 1), 80, -4.0, 4.0, rng);
  double mass = 0.0;
  for (double v : h.aggregated) mass += v * h.cell_area();
  auto box = [](double mu, double sigma) {
    return 0.5 * (std::erf((4.0 - mu) / (sigma * std::numbers::sqrt2)) - std::erf((-4.0 - mu) / (sigma * std::numbers::sqrt2)));
  };
  double want = 0.0;
  for (std::size_t n = 0; n < 3; ++n)
    want += box(d.mu(n, 0), std::exp(d.log_sigma(n, 0))) * box(d.mu(n, 1), std::exp(d.log_sigma(n, 1))) / 3.0;
  EXPECT_NEAR(mass, want, 1e-3);
  double centers = 0.0;
  for (double v : h.centers) centers += v * h.cell_area();
  EXPECT_NEAR(centers, 1.0, 1e-12);
}

TEST(Metrics, HistogramDimsDefaultToMostActive) {
  std::vector<double> mu(20 * 4, 0.0);
  for (std::size_t n = 0; n < 20; ++n) {
    mu[n * 4 + 1] = (n % 2 ? 0.3 : -0.3);
    mu[n * 4 + 3] = (n % 2 ? 1.0 : -1.0);
  }
  Rng rng(16);
  auto h = metrics::posterior_histograms(gaussian_dump(20, 4, mu, std::vector<double>(80, -1.0)), std::nullopt, 10,
                                         -4.0, 4.0, rng);
  EXPECT_EQ(h.dims, (std::pair<std::size_t, std::size_t>{3, 1}));
}

TEST(Metrics, CollapsedModelReport) {
  model::ModelConfig c;
  c.vocab = 8;
  c.embed = 4;
  c.hidden = 6;
  c.latent = 3;
  Rng rng(17);
  auto params = model::initialize(c, rng);
  for (const char* name : {"enc.mu.w", "enc.mu.b", "enc.ls.w", "enc.ls.b", "dec.z.w"}) {
    auto& v = params.at(name).values;
    std::fill(v.begin(), v.end(), 0.0);
  }
  std::vector<TokenSequence> data;
  for (int i = 0; i < 40; ++i) {
    auto body = random_sequence(rng, 5, 2, 7);
    TokenSequence s{kBos};
    s.insert(s.end(), body.begin(), body.end());
    s.push_back(kEos);
    data.push_back(s);
  }
  metrics::MetricsConfig mc;
  mc.s_prior = mc.s_post = 16;
  auto r = metrics::evaluate(c, params, nullptr, {data, nullptr}, mc, rng);
  EXPECT_EQ(r.kl, 0.0);
  EXPECT_EQ(r.mi, 0.0);
  EXPECT_EQ(r.au, 0u);
  EXPECT_EQ(r.cu, 3u);
  EXPECT_EQ(r.prior_ll, r.post_ll);
  EXPECT_EQ(r.n_eval, 40u);
  EXPECT_EQ(metrics::MetricsReport::csv_header(), "prior_ll,prior_ll_se,post_ll,post_ll_se,kl,mi,mi_se,au,cu,n_eval,mi_chunk");
  const auto row = r.csv_row();
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 10);
}
