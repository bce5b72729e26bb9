#pragma once

// Density gap log q_B(z) - log p(z) of a mini-batch aggregated posterior
// q_B(z) = (1/|B|) sum_n q(z|x_n), joint and per-dimension, with Monte Carlo
// KL and mutual-information estimators on shared stratified samples.

#include <cstddef>
#include <span>
#include <vector>

#include "dgvae/autodiff.hpp"
#include "dgvae/distributions.hpp"
#include "dgvae/rng.hpp"

namespace dgvae::dg {

struct PosteriorBatch {
  dist::Family family = dist::Family::kGaussian;
  ad::Var mu;         // [B, D]: Gaussian means or unit vMF directions
  ad::Var log_sigma;  // [B, D], Gaussian only
  double kappa = 0.0; // vMF only
  dist::PriorSpec prior;

  std::size_t size() const { return mu.dim(0); }
  std::size_t dim() const { return mu.dim(1); }
  void validate() const;
};

// Row n * per_point + m of z is the m-th draw from datapoint n.
struct StratifiedSamples {
  ad::Var z;
  std::size_t per_point = 1;

  std::size_t count() const { return z.dim(0); }
  std::size_t source(std::size_t row) const { return row / per_point; }
};

struct SubsetPlan {
  std::size_t aggregation_size = 1;
  std::vector<std::vector<std::size_t>> subsets;
  std::vector<std::size_t> assignment;  // datapoint -> subset

  std::size_t count() const { return subsets.size(); }
};

StratifiedSamples draw_samples(const PosteriorBatch& batch, std::size_t per_point, Rng& rng);

// [S, B] matrix of log q(z_s | x_n).
ad::Var log_posterior_matrix(const PosteriorBatch& batch, ad::Var z);
// [S, B, D] tensor of per-dimension marginal log q(z_{s,i} | x_n). Gaussian only.
ad::Var marginal_log_posterior_tensor(const PosteriorBatch& batch, ad::Var z);
// [S] log p(z_s).
ad::Var log_prior(const PosteriorBatch& batch, ad::Var z);
// [S] log q(z_s | x_{n(s)}) under each sample's own source posterior.
ad::Var own_log_posterior(const PosteriorBatch& batch, const StratifiedSamples& samples);

// [S] density gap at each row of z.
ad::Var density_gap_at(const PosteriorBatch& batch, ad::Var z);
// [S, D] per-dimension marginal density gap.
ad::Var marginal_density_gap(const PosteriorBatch& batch, ad::Var z);
// [S] marginal density gap on dimension i at scalar positions z_i.
ad::Var marginal_density_gap_at(const PosteriorBatch& batch, std::size_t i, ad::Var z_i);

ad::Var mc_kl_aggregated(const PosteriorBatch& batch, const StratifiedSamples& samples);
ad::Var mc_kl_marginal(const PosteriorBatch& batch, const StratifiedSamples& samples);

// [S] log q(z_s|x_{n(s)}) - log p(z_s); its mean is the per-datapoint MC KL.
ad::Var per_datapoint_log_ratio(const PosteriorBatch& batch, const StratifiedSamples& samples);
ad::Var per_datapoint_mc_kl(const PosteriorBatch& batch, const StratifiedSamples& samples);

// Per-sample MI terms: [S] log q(z_s|x_{n(s)}) - log q_B(z_s), or in marginal
// mode the same summed over dimensions of the marginals.
ad::Var mi_per_sample(const PosteriorBatch& batch, const StratifiedSamples& samples, bool marginal);
ad::Var mi_estimate_from_samples(const PosteriorBatch& batch, const StratifiedSamples& samples, bool marginal);

// Standard error of the mean of a 1-D tape value.
double standard_error(ad::Var per_sample);

// |b| > |B| is clamped to |B| with a warning; a size-1 remainder block is
// merged into the preceding subset.
SubsetPlan split_subsets(std::size_t batch_size, std::size_t aggregation_size, Rng& rng);

// Rows `indices` of a [N, K] tape value, differentiable.
ad::Var select_rows(ad::Var x, std::span<const std::size_t> indices);
PosteriorBatch select(const PosteriorBatch& batch, std::span<const std::size_t> indices);
StratifiedSamples select(const StratifiedSamples& samples, std::span<const std::size_t> datapoints);

}  // namespace dgvae::dg
