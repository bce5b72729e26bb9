#pragma once

// Evaluation diagnostics: KL, mutual information, active and consistent
// units, prior/posterior log-likelihood estimates, Rouge-L interpolation
// scoring and aggregated-posterior histograms.

#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dgvae/matrix.hpp"
#include "dgvae/models.hpp"
#include "dgvae/rng.hpp"
#include "dgvae/tokens.hpp"

namespace dgvae::metrics {

struct Estimate {
  double value = 0.0;
  double se = 0.0;
};

struct MetricsConfig {
  std::size_t mi_chunk = 512;
  std::size_t mi_samples_per_point = 1;
  double au_threshold = 0.01;
  double cu_mean_tol = 0.1;
  double cu_var_tol = 0.2;
  std::size_t s_prior = 128;
  std::size_t s_post = 128;
};

struct MetricsReport {
  double prior_ll = 0.0;
  double prior_ll_se = 0.0;
  double post_ll = 0.0;
  double post_ll_se = 0.0;
  double kl = 0.0;
  double mi = 0.0;
  double mi_se = 0.0;
  std::size_t au = 0;
  std::optional<std::size_t> cu;  // absent for vMF
  std::size_t n_eval = 0;
  std::size_t mi_chunk = 0;

  static std::string csv_header();
  // Doubles printed with %.17g; an absent CU is an empty field.
  std::string csv_row() const;
};

// Scalar log((1/n) sum exp(v)); exactly v[0] when all entries agree.
double log_mean_exp(std::span<const double> v);
Estimate mean_and_se(std::span<const double> v);

double kl_metric(const model::PosteriorDump& dump);

struct MiDecomposition {
  Estimate mi;
  double per_datapoint_kl = 0.0;  // MC, shared samples
  double aggregated_kl = 0.0;     // MC, shared samples
};
// Eval set split into ceil(n / chunk) balanced contiguous chunks; per-chunk
// results averaged.
MiDecomposition mi_metric(const model::PosteriorDump& dump, std::size_t chunk, std::size_t samples_per_point, Rng& rng);

// Var over datapoints (1/n) of E_q[z_i | x].
std::vector<double> posterior_mean_variance(const model::PosteriorDump& dump);
std::size_t active_units(const model::PosteriorDump& dump, double threshold);
// Dimension i is consistent iff |mean_x mu_i| <= mean_tol and
// |Var_x(mu_i) + mean_x(sigma_i^2) - 1| <= var_tol. Absent for vMF.
std::optional<std::size_t> consistent_units(const model::PosteriorDump& dump, double mean_tol, double var_tol);

// log p(x_{owner[r]} | z_r) for each row of z.
using LogLikelihoodFn = std::function<std::vector<double>(const Matrix& z, std::span<const std::size_t> owner)>;

// Mean over datapoints of log-mean-exp over S prior draws of log p(x|z).
Estimate prior_ll(const LogLikelihoodFn& loglik, std::size_t n, const dist::PriorSpec& prior, std::size_t samples,
                  Rng& rng);
// Mean over datapoints of log-mean-exp over S posterior draws of the
// importance weight log p(x|z) + log p(z) - log q(z|x).
Estimate post_ll(const LogLikelihoodFn& loglik, const model::PosteriorDump& dump, const dist::PriorSpec& prior,
                 std::size_t samples, Rng& rng);
// Per-datapoint log importance weights for a single posterior draw each.
std::vector<double> single_sample_elbo(const LogLikelihoodFn& loglik, const model::PosteriorDump& dump,
                                       const dist::PriorSpec& prior, Rng& rng);

// Sequence or point eval set for a model.
struct EvalSet {
  std::span<const TokenSequence> sequences;
  const Matrix* points = nullptr;

  std::size_t size() const { return points ? points->rows : sequences.size(); }
};

model::PosteriorDump encode_eval(const model::ModelConfig& config, const model::ParameterSet& params,
                                 const obj::BnStats* bn, const EvalSet& data);
LogLikelihoodFn model_log_likelihood(const model::ModelConfig& config, const model::ParameterSet& params,
                                     const EvalSet& data);

// Full report. Draw order from `rng`: MI samples, prior samples, posterior samples.
MetricsReport evaluate(const model::ModelConfig& config, const model::ParameterSet& params, const obj::BnStats* bn,
                       const EvalSet& data, const MetricsConfig& mc, Rng& rng);

// LCS-based F1 of a candidate against a reference; both empty gives 1, one empty gives 0.
double rouge_l_f1(std::span<const Token> candidate, std::span<const Token> reference);
std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b);

struct InterpolationResult {
  std::array<double, 11> lambdas{};
  std::vector<TokenSequence> decoded;  // markers included
  std::array<double, 11> scores{};
};

// z_lambda = (1 - lambda) z_a + lambda z_b between posterior centers; vMF
// centers are renormalized to the sphere, or spherically interpolated when
// `slerp` is set. Scores use marker-free sequences.
InterpolationResult interpolate(const model::ModelConfig& config, const model::ParameterSet& params,
                                const obj::BnStats* bn, const TokenSequence& x_a, const TokenSequence& x_b,
                                bool slerp = false);
// Grid weights for index i: {(10 - i) / 10, i / 10}.
std::pair<double, double> interpolation_weights(std::size_t i);
std::vector<double> interpolate_latent(std::span<const double> za, std::span<const double> zb, std::size_t i,
                                       bool sphere, bool slerp);

struct Histogram {
  std::pair<std::size_t, std::size_t> dims{0, 1};
  std::size_t bins = 100;
  double lo = -4.0;
  double hi = 4.0;
  std::vector<double> aggregated;  // [bins x bins] density in cell (ix, iy) at ix * bins + iy
  std::vector<double> centers;     // posterior-center density on the same grid

  double cell_area() const { return std::pow((hi - lo) / static_cast<double>(bins), 2); }
  double cell_center(std::size_t i) const { return lo + (static_cast<double>(i) + 0.5) * (hi - lo) / bins; }
};

// Dims default to the two with the largest posterior-mean variance. Gaussian
// aggregated densities are exact cell averages of the per-datapoint marginal
// 2-D Gaussians; vMF uses `vmf_samples` draws per datapoint.
Histogram posterior_histograms(const model::PosteriorDump& dump, std::optional<std::pair<std::size_t, std::size_t>> dims,
                               std::size_t bins, double lo, double hi, Rng& rng, std::size_t vmf_samples = 16);
void write_histogram(const Histogram& h, const std::filesystem::path& file);

}  // namespace dgvae::metrics
