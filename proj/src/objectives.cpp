#include "dgvae/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dgvae::obj {

namespace {

using ad::Var;

struct KindEntry {
  Kind kind;
  const char* name;
};

constexpr KindEntry kKinds[] = {
    {Kind::kElbo, "elbo"},         {Kind::kBeta, "beta"},         {Kind::kFreeBits, "freebits"},
    {Kind::kBn, "bn"},             {Kind::kVmf, "vmf"},           {Kind::kDgJoint, "dg-joint"},
    {Kind::kDgMarginal, "dg-marginal"}, {Kind::kDgVmf, "dg-vmf"},
};

void require_family(const dg::PosteriorBatch& batch, dist::Family family, const char* what) {
  if (batch.family != family)
    throw std::invalid_argument(std::string(what) + (family == dist::Family::kVmf
                                                         ? ": requires vMF posteriors"
                                                         : ": requires Gaussian posteriors"));
}

}  // namespace

const char* kind_name(Kind kind) {
  for (const auto& e : kKinds)
    if (e.kind == kind) return e.name;
  return "unknown";
}

std::vector<std::string> kind_names() {
  std::vector<std::string> out;
  for (const auto& e : kKinds) out.emplace_back(e.name);
  return out;
}

Kind parse_kind(std::string_view name) {
  for (const auto& e : kKinds)
    if (name == e.name) return e.kind;
  std::string valid;
  for (const auto& e : kKinds) valid += (valid.empty() ? "" : ", ") + std::string(e.name);
  throw std::invalid_argument("unknown objective kind '" + std::string(name) + "' (valid kinds: " + valid + ")");
}

bool uses_vmf(Kind kind) { return kind == Kind::kVmf || kind == Kind::kDgVmf; }

bool uses_density_gap(Kind kind) {
  return kind == Kind::kDgJoint || kind == Kind::kDgMarginal || kind == Kind::kDgVmf;
}

void ObjectiveConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("objective: beta must lie in [0, 1]");
  if (!(lambda_kl >= 0.0)) throw std::invalid_argument("objective: lambda_kl must be non-negative");
  if (!(gamma > 0.0)) throw std::invalid_argument("objective: gamma must be positive");
  if (!(kappa >= 0.0)) throw std::invalid_argument("objective: kappa must be non-negative");
  if (aggregation_size < 1) throw std::invalid_argument("objective: aggregation_size must be at least 1");
  if (samples_per_point < 1) throw std::invalid_argument("objective: samples_per_point must be at least 1");
  switch (annealing.mode) {
    case Annealing::Mode::kNone: break;
    case Annealing::Mode::kLinear:
      if (!(annealing.epochs >= 0.0)) throw std::invalid_argument("annealing: epochs must be non-negative");
      break;
    case Annealing::Mode::kCyclic:
      if (!(annealing.period > 0.0) || !(annealing.ramp >= 0.0))
        throw std::invalid_argument("annealing: cyclic needs period > 0 and ramp >= 0");
      break;
  }
}

double anneal_weight(const Annealing& schedule, std::size_t step, std::size_t steps_per_epoch) {
  if (steps_per_epoch == 0) throw std::invalid_argument("anneal_weight: steps_per_epoch must be positive");
  const double epoch = static_cast<double>(step) / static_cast<double>(steps_per_epoch);
  switch (schedule.mode) {
    case Annealing::Mode::kNone: return 1.0;
    case Annealing::Mode::kLinear:
      return schedule.epochs <= 0.0 ? 1.0 : std::min(1.0, epoch / schedule.epochs);
    case Annealing::Mode::kCyclic:
      return schedule.ramp <= 0.0 ? 1.0 : std::min(1.0, std::fmod(epoch, schedule.period) / schedule.ramp);
  }
  return 1.0;
}

Var reconstruction_term(Var log_likelihoods) {
  if (log_likelihoods.shape().size() != 1 || log_likelihoods.dim(0) == 0)
    throw std::invalid_argument("reconstruction_term: expected a non-empty [B] vector of log-likelihoods");
  return ad::mean(log_likelihoods);
}

LossBreakdown compose(Var reconstruction, Var regularizer, double anneal) {
  LossBreakdown out;
  out.total = ad::scale(regularizer, anneal) - reconstruction;
  out.regularizer_var = regularizer;
  out.reconstruction = reconstruction.item();
  out.regularizer = regularizer.item();
  out.anneal_weight = anneal;
  return out;
}

Var mean_closed_form_kl(const dg::PosteriorBatch& batch) {
  batch.validate();
  if (batch.family == dist::Family::kVmf)
    return ad::constant(batch.mu.tape(), dist::vmf_kl_to_uniform(batch.dim(), batch.kappa));
  return ad::mean(dist::gaussian_kl_to_standard(batch.mu, batch.log_sigma));
}

LossBreakdown elbo_loss(const dg::PosteriorBatch& batch, Var reconstruction, double anneal) {
  return compose(reconstruction, mean_closed_form_kl(batch), anneal);
}

LossBreakdown beta_loss(const dg::PosteriorBatch& batch, Var reconstruction, double beta, double anneal) {
  return compose(reconstruction, ad::scale(mean_closed_form_kl(batch), beta), anneal);
}

LossBreakdown freebits_loss(const dg::PosteriorBatch& batch, Var reconstruction, double lambda_kl, bool per_dim,
                            double anneal) {
  require_family(batch, dist::Family::kGaussian, "freebits_loss");
  batch.validate();
  ad::Tape& tape = batch.mu.tape();
  if (!per_dim) {
    auto kl = mean_closed_form_kl(batch);
    return compose(reconstruction, ad::maximum(kl, ad::constant(tape, lambda_kl)), anneal);
  }
  const std::size_t D = batch.dim();
  auto terms = ad::square(batch.mu) + ad::exp(2.0 * batch.log_sigma) - 2.0 * batch.log_sigma;
  auto per_dim_kl = ad::scale(ad::mean(terms, 0), 0.5, -0.5);
  auto floor = ad::constant(tape, {D}, std::vector<double>(D, lambda_kl / static_cast<double>(D)));
  return compose(reconstruction, ad::sum(ad::maximum(per_dim_kl, floor)), anneal);
}

Var dg_regularizer(const dg::PosteriorBatch& batch, const dg::StratifiedSamples& samples, const dg::SubsetPlan& plan,
                   DgVariant variant) {
  if (variant == DgVariant::kMarginal) require_family(batch, dist::Family::kGaussian, "dg_loss (marginal)");
  auto estimate = [&](const dg::PosteriorBatch& b, const dg::StratifiedSamples& s) {
    return variant == DgVariant::kJoint ? dg::mc_kl_aggregated(b, s) : dg::mc_kl_marginal(b, s);
  };
  if (plan.count() == 0) throw std::invalid_argument("dg_loss: empty subset plan");
  if (plan.count() == 1 && plan.subsets[0].size() == batch.size()) return estimate(batch, samples);
  Var total;
  for (const auto& subset : plan.subsets) {
    auto term = estimate(dg::select(batch, subset), dg::select(samples, subset));
    total = total.valid() ? total + term : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(plan.count()));
}

LossBreakdown dg_loss(const dg::PosteriorBatch& batch, const dg::StratifiedSamples& samples,
                      const dg::SubsetPlan& plan, DgVariant variant, Var reconstruction, double anneal) {
  return compose(reconstruction, dg_regularizer(batch, samples, plan, variant), anneal);
}

Var bn_transform(Var mu, Var bias, double gamma, BnStats& stats, bool train) {
  if (mu.shape().size() != 2) throw std::invalid_argument("bn_transform: expected [B, D] means");
  const std::size_t B = mu.dim(0), D = mu.dim(1);
  if (bias.shape() != ad::Shape{D}) throw std::invalid_argument("bn_transform: bias must have shape [D]");
  if (stats.running_mean.size() != D) stats = BnStats(D);
  ad::Tape& tape = mu.tape();
  if (!train) {
    std::vector<double> shift(D), inv(D);
    for (std::size_t d = 0; d < D; ++d) {
      shift[d] = stats.running_mean[d];
      inv[d] = gamma / std::sqrt(stats.running_var[d] + kBnEps * kBnEps);
    }
    return (mu - ad::constant(tape, {D}, shift)) * ad::constant(tape, {D}, inv) + bias;
  }
  if (B < 2) throw std::invalid_argument("bn_transform: train mode needs a batch of at least 2");
  auto centered = mu - ad::mean(mu, 0);
  auto var = ad::mean(ad::square(centered), 0);
  auto inv_std = ad::exp(ad::scale(ad::log(var + kBnEps * kBnEps), -0.5));
  const auto mean_v = ad::mean(mu, 0).values();
  const auto var_v = var.values();
  for (std::size_t d = 0; d < D; ++d) {
    stats.running_mean[d] = (1.0 - kBnMomentum) * stats.running_mean[d] + kBnMomentum * mean_v[d];
    stats.running_var[d] = (1.0 - kBnMomentum) * stats.running_var[d] + kBnMomentum * var_v[d];
  }
  return ad::scale(centered * inv_std, gamma) + bias;
}

LossBreakdown objective_loss(const ObjectiveConfig& config, const dg::PosteriorBatch& batch,
                             const dg::StratifiedSamples& samples, Var reconstruction, double anneal, Rng& rng) {
  const bool vmf = uses_vmf(config.kind);
  require_family(batch, vmf ? dist::Family::kVmf : dist::Family::kGaussian, kind_name(config.kind));
  switch (config.kind) {
    case Kind::kElbo:
    case Kind::kBn:
    case Kind::kVmf: return elbo_loss(batch, reconstruction, anneal);
    case Kind::kBeta: return beta_loss(batch, reconstruction, config.beta, anneal);
    case Kind::kFreeBits:
      return freebits_loss(batch, reconstruction, config.lambda_kl, config.freebits_per_dim, anneal);
    case Kind::kDgJoint:
    case Kind::kDgMarginal:
    case Kind::kDgVmf: {
      const auto plan = dg::split_subsets(batch.size(), config.aggregation_size, rng);
      const auto variant = config.kind == Kind::kDgMarginal ? DgVariant::kMarginal : DgVariant::kJoint;
      return dg_loss(batch, samples, plan, variant, reconstruction, anneal);
    }
  }
  throw std::logic_error("objective_loss: unhandled kind");
}

}  // namespace dgvae::obj
