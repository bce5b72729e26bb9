#pragma once

// Latent distributions: diagonal Gaussian and von Mises-Fisher posteriors,
// the standard-normal and uniform-hypersphere priors, reparameterized
// sampling and closed-form divergences to the prior.

#include <cstddef>
#include <span>
#include <vector>

#include "dgvae/autodiff.hpp"
#include "dgvae/matrix.hpp"
#include "dgvae/rng.hpp"

namespace dgvae::dist {

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

enum class Family { kGaussian, kVmf };

struct GaussianPosterior {
  std::vector<double> mu;
  std::vector<double> log_sigma;

  std::size_t dim() const { return mu.size(); }
  // Throws unless mu and log_sigma have equal length and log_sigma is finite.
  void validate() const;
};

struct VmfPosterior {
  std::vector<double> mu_dir;  // unit norm
  double kappa = 0.0;

  std::size_t dim() const { return mu_dir.size(); }
  void validate() const;
};

enum class PriorKind { kStandardNormal, kUniformSphere };

struct PriorSpec {
  PriorKind kind = PriorKind::kStandardNormal;
  std::size_t dim = 1;

  double log_density(std::span<const double> z) const;
};

double standard_normal_log_pdf(std::span<const double> z);
double gaussian_log_pdf(const GaussianPosterior& post, std::span<const double> z);
double gaussian_marginal_log_pdf(const GaussianPosterior& post, std::size_t i, double z_i);
double gaussian_kl_to_standard(const GaussianPosterior& post);

// M draws z = mu + sigma * eps, one per row.
Matrix gaussian_sample(const GaussianPosterior& post, std::size_t count, Rng& rng);

// Tape version over a batch: mu, log_sigma are [B, D]; returns [B * M, D]
// with row n * M + m holding the m-th draw for datapoint n.
ad::Var gaussian_sample_reparam(ad::Var mu, ad::Var log_sigma, std::size_t count, Rng& rng);

// Per-datapoint closed-form KL to N(0, I) over a [B, D] batch; returns [B].
ad::Var gaussian_kl_to_standard(ad::Var mu, ad::Var log_sigma);

// log I_nu(x) for nu >= 0, x >= 0, evaluated without overflow.
double log_bessel_i(double nu, double x);
// I_{nu+1}(x) / I_nu(x).
double bessel_ratio(double nu, double x);

double uniform_sphere_log_density(std::size_t dim);
double vmf_log_norm_const(std::size_t dim, double kappa);
// E[mu . z] under vMF(mu, kappa) = I_{D/2}(kappa) / I_{D/2-1}(kappa).
double vmf_mean_resultant_length(std::size_t dim, double kappa);
double vmf_log_pdf(const VmfPosterior& post, std::span<const double> z);
double vmf_kl_to_uniform(std::size_t dim, double kappa);

// Returns z unchanged when unit norm within 1e-6, rescaled when within 1e-3,
// and throws otherwise.
std::vector<double> checked_unit(std::span<const double> z);

Matrix vmf_sample(const VmfPosterior& post, std::size_t count, Rng& rng);

// Draws (w, v) around the north pole e_1: row m is [w, sqrt(1 - w^2) v].
Matrix vmf_sample_north_pole(std::size_t dim, double kappa, std::size_t count, Rng& rng);

// Tape version: mu_dir is [B, D] of unit rows. North-pole draws are mapped to
// each mean direction by the Householder reflection taking e_1 to mu, so the
// gradient reaches mu_dir. Returns [B * M, D], row n * M + m.
ad::Var vmf_sample_reparam(ad::Var mu_dir, double kappa, std::size_t count, Rng& rng);

// Normalizes each row of a [B, D] tape value to unit length.
ad::Var normalize_rows(ad::Var x);

}  // namespace dgvae::dist
