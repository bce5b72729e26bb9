#include "dgvae/densitygap.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dgvae::dg {

namespace {

using ad::Var;

void require_gaussian(const PosteriorBatch& batch, const char* what) {
  if (batch.family != dist::Family::kGaussian)
    throw std::invalid_argument(std::string(what) + ": marginal density gap requires Gaussian posteriors");
}

// Renormalizes rows that drifted off the sphere by more than 1e-6, rejects
// rows beyond 1e-3.
Var on_sphere(Var z) {
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  const auto v = z.values();
  bool drift = false;
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < cols; ++c) n2 += v[r * cols + c] * v[r * cols + c];
    const double dev = std::abs(std::sqrt(n2) - 1.0);
    if (dev > 1e-3 || !std::isfinite(dev))
      throw std::invalid_argument("density gap: sample " + std::to_string(r) + " is off the unit sphere");
    if (dev > 1e-6) drift = true;
  }
  return drift ? dist::normalize_rows(z) : z;
}

Var prepare(const PosteriorBatch& batch, Var z) {
  if (z.shape().size() != 2 || z.dim(1) != batch.dim())
    throw std::invalid_argument("density gap: samples " + ad::shape_string(z.shape()) + " do not match latent dim " +
                                std::to_string(batch.dim()));
  if (batch.prior.kind == dist::PriorKind::kUniformSphere) return on_sphere(z);
  return z;
}

void check_samples(const PosteriorBatch& batch, const StratifiedSamples& samples) {
  if (samples.per_point == 0 || samples.count() != batch.size() * samples.per_point)
    throw std::invalid_argument("density gap: " + std::to_string(samples.count()) + " samples do not match " +
                                std::to_string(batch.size()) + " datapoints x " + std::to_string(samples.per_point));
}

Var repeat_rows(Var x, std::size_t count) {
  if (count == 1) return x;
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto r = ad::broadcast_to(ad::reshape(x, {rows, 1, cols}), {rows, count, cols});
  return ad::reshape(r, {rows * count, cols});
}

// Elementwise Gaussian log density, shapes broadcast.
Var gaussian_terms(Var z, Var mu, Var log_sigma) {
  auto r = (z - mu) * ad::exp(-log_sigma);
  return ad::scale(ad::square(r), -0.5, -0.5 * dist::kLogTwoPi) - log_sigma;
}

Var standard_normal_terms(Var z) { return ad::scale(ad::square(z), -0.5, -0.5 * dist::kLogTwoPi); }

}  // namespace

void PosteriorBatch::validate() const {
  if (!mu.valid() || mu.shape().size() != 2 || mu.dim(0) == 0)
    throw std::invalid_argument("PosteriorBatch: mu must be a non-empty [B, D] tensor");
  if (prior.dim != dim())
    throw std::invalid_argument("PosteriorBatch: prior dim " + std::to_string(prior.dim) + " vs posterior dim " +
                                std::to_string(dim()));
  if (family == dist::Family::kGaussian) {
    if (!log_sigma.valid() || log_sigma.shape() != mu.shape())
      throw std::invalid_argument("PosteriorBatch: log_sigma must match mu");
    if (prior.kind != dist::PriorKind::kStandardNormal)
      throw std::invalid_argument("PosteriorBatch: Gaussian posteriors need the standard-normal prior");
  } else {
    if (prior.kind != dist::PriorKind::kUniformSphere)
      throw std::invalid_argument("PosteriorBatch: vMF posteriors need the uniform-hypersphere prior");
    if (!(kappa >= 0.0)) throw std::invalid_argument("PosteriorBatch: kappa must be non-negative");
  }
}

StratifiedSamples draw_samples(const PosteriorBatch& batch, std::size_t per_point, Rng& rng) {
  batch.validate();
  if (batch.family == dist::Family::kGaussian)
    return {dist::gaussian_sample_reparam(batch.mu, batch.log_sigma, per_point, rng), per_point};
  return {dist::vmf_sample_reparam(batch.mu, batch.kappa, per_point, rng), per_point};
}

Var marginal_log_posterior_tensor(const PosteriorBatch& batch, Var z) {
  require_gaussian(batch, "marginal_log_posterior_tensor");
  batch.validate();
  z = prepare(batch, z);
  const std::size_t S = z.dim(0), B = batch.size(), D = batch.dim();
  auto zs = ad::reshape(z, {S, 1, D});
  auto mu = ad::reshape(batch.mu, {1, B, D});
  auto ls = ad::reshape(batch.log_sigma, {1, B, D});
  return gaussian_terms(zs, mu, ls);
}

Var log_posterior_matrix(const PosteriorBatch& batch, Var z) {
  batch.validate();
  if (batch.family == dist::Family::kGaussian) return ad::sum(marginal_log_posterior_tensor(batch, z), 2);
  z = prepare(batch, z);
  const double log_c = dist::vmf_log_norm_const(batch.dim(), batch.kappa);
  return ad::scale(ad::matmul(z, ad::transpose(batch.mu)), batch.kappa, log_c);
}

Var log_prior(const PosteriorBatch& batch, Var z) {
  z = prepare(batch, z);
  if (batch.prior.kind == dist::PriorKind::kStandardNormal) return ad::sum(standard_normal_terms(z), 1);
  const double lu = dist::uniform_sphere_log_density(batch.dim());
  return ad::constant(z.tape(), {z.dim(0)}, std::vector<double>(z.dim(0), lu));
}

Var own_log_posterior(const PosteriorBatch& batch, const StratifiedSamples& samples) {
  batch.validate();
  check_samples(batch, samples);
  Var z = prepare(batch, samples.z);
  auto mu = repeat_rows(batch.mu, samples.per_point);
  if (batch.family == dist::Family::kGaussian)
    return ad::sum(gaussian_terms(z, mu, repeat_rows(batch.log_sigma, samples.per_point)), 1);
  const double log_c = dist::vmf_log_norm_const(batch.dim(), batch.kappa);
  return ad::scale(ad::sum(z * mu, 1), batch.kappa, log_c);
}

Var density_gap_at(const PosteriorBatch& batch, Var z) {
  auto mixture = ad::logmeanexp(log_posterior_matrix(batch, z), 1);
  return mixture - log_prior(batch, z);
}

Var marginal_density_gap(const PosteriorBatch& batch, Var z) {
  auto mixture = ad::logmeanexp(marginal_log_posterior_tensor(batch, z), 1);
  return mixture - standard_normal_terms(z);
}

Var marginal_density_gap_at(const PosteriorBatch& batch, std::size_t i, Var z_i) {
  require_gaussian(batch, "marginal_density_gap_at");
  batch.validate();
  if (i >= batch.dim())
    throw std::out_of_range("marginal_density_gap_at: dimension " + std::to_string(i) + " out of range");
  if (z_i.shape().size() != 1) throw std::invalid_argument("marginal_density_gap_at: z_i must be a 1-D tensor");
  PosteriorBatch one = batch;
  one.mu = ad::slice(batch.mu, 1, i, i + 1);
  one.log_sigma = ad::slice(batch.log_sigma, 1, i, i + 1);
  one.prior.dim = 1;
  auto gap = marginal_density_gap(one, ad::reshape(z_i, {z_i.dim(0), 1}));
  return ad::reshape(gap, {z_i.dim(0)});
}

Var mc_kl_aggregated(const PosteriorBatch& batch, const StratifiedSamples& samples) {
  check_samples(batch, samples);
  return ad::mean(density_gap_at(batch, samples.z));
}

Var mc_kl_marginal(const PosteriorBatch& batch, const StratifiedSamples& samples) {
  require_gaussian(batch, "mc_kl_marginal");
  check_samples(batch, samples);
  return ad::sum(ad::mean(marginal_density_gap(batch, samples.z), 0));
}

Var per_datapoint_log_ratio(const PosteriorBatch& batch, const StratifiedSamples& samples) {
  return own_log_posterior(batch, samples) - log_prior(batch, samples.z);
}

Var per_datapoint_mc_kl(const PosteriorBatch& batch, const StratifiedSamples& samples) {
  return ad::mean(per_datapoint_log_ratio(batch, samples));
}

Var mi_per_sample(const PosteriorBatch& batch, const StratifiedSamples& samples, bool marginal) {
  check_samples(batch, samples);
  if (!marginal) {
    auto mixture = ad::logmeanexp(log_posterior_matrix(batch, samples.z), 1);
    return own_log_posterior(batch, samples) - mixture;
  }
  require_gaussian(batch, "mi_estimate_from_samples");
  auto mixture = ad::logmeanexp(marginal_log_posterior_tensor(batch, samples.z), 1);
  auto own = gaussian_terms(samples.z, repeat_rows(batch.mu, samples.per_point),
                            repeat_rows(batch.log_sigma, samples.per_point));
  return ad::sum(own - mixture, 1);
}

Var mi_estimate_from_samples(const PosteriorBatch& batch, const StratifiedSamples& samples, bool marginal) {
  return ad::mean(mi_per_sample(batch, samples, marginal));
}

double standard_error(Var per_sample) {
  const auto v = per_sample.values();
  if (v.size() < 2) return 0.0;
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (n - 1.0) / n);
}

SubsetPlan split_subsets(std::size_t batch_size, std::size_t aggregation_size, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("split_subsets: empty batch");
  if (aggregation_size == 0) throw std::invalid_argument("split_subsets: aggregation size must be at least 1");
  if (aggregation_size > batch_size) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true))
      spdlog::warn("aggregation size {} exceeds batch size {}; clamping to the batch size", aggregation_size,
                   batch_size);
    aggregation_size = batch_size;
  }
  std::vector<std::size_t> perm(batch_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = batch_size; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);

  SubsetPlan plan;
  plan.aggregation_size = aggregation_size;
  for (std::size_t start = 0; start < batch_size; start += aggregation_size) {
    const std::size_t end = std::min(batch_size, start + aggregation_size);
    std::vector<std::size_t> block(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                   perm.begin() + static_cast<std::ptrdiff_t>(end));
    if (block.size() == 1 && aggregation_size > 1 && !plan.subsets.empty())
      plan.subsets.back().push_back(block.front());
    else
      plan.subsets.push_back(std::move(block));
  }
  plan.assignment.assign(batch_size, 0);
  for (std::size_t c = 0; c < plan.subsets.size(); ++c)
    for (std::size_t n : plan.subsets[c]) plan.assignment[n] = c;
  return plan;
}

Var select_rows(Var x, std::span<const std::size_t> indices) {
  if (x.shape().size() != 2) throw std::invalid_argument("select_rows: expected a [N, K] tensor");
  const std::size_t n = x.dim(0);
  std::vector<double> onehot(indices.size() * n, 0.0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= n) throw std::out_of_range("select_rows: row " + std::to_string(indices[r]) + " out of range");
    onehot[r * n + indices[r]] = 1.0;
  }
  return ad::matmul(ad::constant(x.tape(), {indices.size(), n}, std::move(onehot)), x);
}

PosteriorBatch select(const PosteriorBatch& batch, std::span<const std::size_t> indices) {
  PosteriorBatch out = batch;
  out.mu = select_rows(batch.mu, indices);
  if (batch.family == dist::Family::kGaussian) out.log_sigma = select_rows(batch.log_sigma, indices);
  return out;
}

StratifiedSamples select(const StratifiedSamples& samples, std::span<const std::size_t> datapoints) {
  std::vector<std::size_t> rows;
  rows.reserve(datapoints.size() * samples.per_point);
  for (std::size_t n : datapoints)
    for (std::size_t m = 0; m < samples.per_point; ++m) rows.push_back(n * samples.per_point + m);
  return {select_rows(samples.z, rows), samples.per_point};
}

}  // namespace dgvae::dg
