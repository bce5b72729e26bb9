#pragma once

// Per-batch training losses. Every objective is minimized as
// total = -reconstruction + anneal_weight * regularizer.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "dgvae/autodiff.hpp"
#include "dgvae/densitygap.hpp"
#include "dgvae/rng.hpp"

namespace dgvae::obj {

enum class Kind { kElbo, kBeta, kFreeBits, kBn, kVmf, kDgJoint, kDgMarginal, kDgVmf };

const char* kind_name(Kind kind);
std::vector<std::string> kind_names();
// Throws std::invalid_argument listing the valid kinds.
Kind parse_kind(std::string_view name);
bool uses_vmf(Kind kind);
bool uses_density_gap(Kind kind);

struct Annealing {
  enum class Mode { kNone, kLinear, kCyclic };
  Mode mode = Mode::kNone;
  double epochs = 10.0;  // linear ramp length
  double period = 20.0;  // cyclic period
  double ramp = 10.0;    // cyclic ramp length
};

struct ObjectiveConfig {
  Kind kind = Kind::kElbo;
  double beta = 1.0;
  double lambda_kl = 4.0;
  bool freebits_per_dim = false;
  double gamma = 1.0;
  double kappa = 13.0;
  std::size_t aggregation_size = 32;
  std::size_t samples_per_point = 1;
  Annealing annealing;

  void validate() const;
};

double anneal_weight(const Annealing& schedule, std::size_t step, std::size_t steps_per_epoch);

struct LossBreakdown {
  ad::Var total;
  ad::Var regularizer_var;
  double reconstruction = 0.0;
  double regularizer = 0.0;
  double anneal_weight = 1.0;
};

// Batch mean of per-datapoint log-likelihoods [B].
ad::Var reconstruction_term(ad::Var log_likelihoods);

LossBreakdown compose(ad::Var reconstruction, ad::Var regularizer, double anneal);

// Mean closed-form KL to the prior: Gaussian [B, D] batch or the constant vMF KL.
ad::Var mean_closed_form_kl(const dg::PosteriorBatch& batch);

LossBreakdown elbo_loss(const dg::PosteriorBatch& batch, ad::Var reconstruction, double anneal);
LossBreakdown beta_loss(const dg::PosteriorBatch& batch, ad::Var reconstruction, double beta, double anneal);
LossBreakdown freebits_loss(const dg::PosteriorBatch& batch, ad::Var reconstruction, double lambda_kl, bool per_dim,
                            double anneal);

enum class DgVariant { kJoint, kMarginal };
// Regularizer = mean over subsets of the Monte Carlo aggregated KL computed
// within each subset.
ad::Var dg_regularizer(const dg::PosteriorBatch& batch, const dg::StratifiedSamples& samples,
                       const dg::SubsetPlan& plan, DgVariant variant);
LossBreakdown dg_loss(const dg::PosteriorBatch& batch, const dg::StratifiedSamples& samples,
                      const dg::SubsetPlan& plan, DgVariant variant, ad::Var reconstruction, double anneal);

struct BnStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BnStats(std::size_t dim = 0) : running_mean(dim, 0.0), running_var(dim, 1.0) {}
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// mu' = gamma * (mu - mean) / sqrt(var + eps^2) + bias per dimension, with
// biased batch statistics in train mode (which also updates the running EMA)
// and the running statistics in eval mode.
ad::Var bn_transform(ad::Var mu, ad::Var bias, double gamma, BnStats& stats, bool train);

// Dispatches on config.kind. The batch must already carry any BN-transformed
// means; `reconstruction` is the batch-mean log-likelihood.
LossBreakdown objective_loss(const ObjectiveConfig& config, const dg::PosteriorBatch& batch,
                             const dg::StratifiedSamples& samples, ad::Var reconstruction, double anneal, Rng& rng);

}  // namespace dgvae::obj
