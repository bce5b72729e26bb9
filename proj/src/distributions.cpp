#include "dgvae/distributions.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dgvae::dist {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kSeriesLimit = 1000.0;

void require_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want)
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(got) + " vs " +
                                std::to_string(want) + ")");
}

double log_bessel_series(double nu, double x) {
  // sum_k (x/2)^(2k+nu) / (k! Gamma(k+nu+1)); all terms positive, summed in log space.
  const double two_log_half_x = 2.0 * std::log(0.5 * x);
  std::vector<double> log_terms;
  double log_term = nu * std::log(0.5 * x) - std::lgamma(nu + 1.0);
  double peak = log_term;
  for (int k = 0; k < 1000000; ++k) {
    log_terms.push_back(log_term);
    peak = std::max(peak, log_term);
    if (log_term < peak - 42.0) break;
    log_term += two_log_half_x - std::log(k + 1.0) - std::log(k + nu + 1.0);
  }
  double acc = 0.0;
  for (auto it = log_terms.rbegin(); it != log_terms.rend(); ++it) acc += std::exp(*it - peak);
  return peak + std::log(acc);
}

// Uniform (Debye) expansion in 1/nu.
double log_bessel_debye(double nu, double x) {
  const double z = x / nu;
  const double root = std::sqrt(1.0 + z * z);
  const double p = 1.0 / root;
  const double eta = root + std::log(z / (1.0 + root));
  const double p2 = p * p;
  const double u1 = p * (3.0 - 5.0 * p2) / 24.0;
  const double u2 = p2 * (81.0 + p2 * (-462.0 + p2 * 385.0)) / 1152.0;
  const double u3 = p * p2 * (30375.0 + p2 * (-369603.0 + p2 * (765765.0 - p2 * 425425.0))) / 414720.0;
  const double u4 =
      p2 * p2 *
      (4465125.0 + p2 * (-94121676.0 + p2 * (349922430.0 + p2 * (-446185740.0 + p2 * 185910725.0)))) /
      39813120.0;
  const double inv = 1.0 / nu;
  const double corr = 1.0 + inv * (u1 + inv * (u2 + inv * (u3 + inv * u4)));
  return nu * eta - 0.5 * std::log(2.0 * std::numbers::pi * nu) - 0.25 * std::log(1.0 + z * z) + std::log(corr);
}

// Large-argument (Hankel) expansion; the truncation error is of order exp(-2x).
double log_bessel_hankel(double nu, double x) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double acc = 1.0;
  for (int k = 1; k < 30; ++k) {
    const double odd = 2.0 * k - 1.0;
    const double next = -term * (mu - odd * odd) / (k * 8.0 * x);
    if (std::abs(next) >= std::abs(term)) break;
    term = next;
    acc += term;
    if (std::abs(term) < 1e-17 * std::abs(acc)) break;
  }
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(acc);
}

ad::Var repeat_rows(ad::Var x, std::size_t count) {
  if (count == 1) return x;
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto r = ad::reshape(x, {rows, 1, cols});
  r = ad::broadcast_to(r, {rows, count, cols});
  return ad::reshape(r, {rows * count, cols});
}

}  // namespace

void GaussianPosterior::validate() const {
  require_dim(log_sigma.size(), mu.size(), "GaussianPosterior");
  for (double s : log_sigma)
    if (!std::isfinite(s)) throw std::invalid_argument("GaussianPosterior: non-finite log_sigma");
}

void VmfPosterior::validate() const {
  if (mu_dir.size() < 2) throw std::invalid_argument("VmfPosterior: dimension must be at least 2");
  double n2 = 0.0;
  for (double v : mu_dir) n2 += v * v;
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-9) throw std::invalid_argument("VmfPosterior: mu_dir is not unit norm");
  if (!(kappa >= 0.0)) throw std::invalid_argument("VmfPosterior: kappa must be non-negative");
}

double PriorSpec::log_density(std::span<const double> z) const {
  require_dim(z.size(), dim, "PriorSpec::log_density");
  if (kind == PriorKind::kStandardNormal) return standard_normal_log_pdf(z);
  checked_unit(z);
  return uniform_sphere_log_density(dim);
}

double standard_normal_log_pdf(std::span<const double> z) {
  double s = 0.0;
  for (double v : z) s += -0.5 * kLogTwoPi - 0.5 * v * v;
  return s;
}

double gaussian_marginal_log_pdf(const GaussianPosterior& post, std::size_t i, double z_i) {
  if (i >= post.dim())
    throw std::out_of_range("gaussian_marginal_log_pdf: dimension " + std::to_string(i) + " out of range");
  const double ls = post.log_sigma[i];
  const double r = (z_i - post.mu[i]) * std::exp(-ls);
  return -0.5 * kLogTwoPi - ls - 0.5 * r * r;
}

double gaussian_log_pdf(const GaussianPosterior& post, std::span<const double> z) {
  post.validate();
  require_dim(z.size(), post.dim(), "gaussian_log_pdf");
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += gaussian_marginal_log_pdf(post, i, z[i]);
  return s;
}

double gaussian_kl_to_standard(const GaussianPosterior& post) {
  post.validate();
  double kl = 0.0;
  for (std::size_t i = 0; i < post.dim(); ++i) {
    const double ls = post.log_sigma[i];
    kl += 0.5 * (post.mu[i] * post.mu[i] + std::exp(2.0 * ls) - 1.0 - 2.0 * ls);
  }
  return kl;
}

Matrix gaussian_sample(const GaussianPosterior& post, std::size_t count, Rng& rng) {
  post.validate();
  if (count == 0) throw std::invalid_argument("gaussian_sample: sample count must be at least 1");
  Matrix out(count, post.dim());
  for (std::size_t m = 0; m < count; ++m)
    for (std::size_t i = 0; i < post.dim(); ++i) out(m, i) = post.mu[i] + std::exp(post.log_sigma[i]) * rng.normal();
  return out;
}

ad::Var gaussian_sample_reparam(ad::Var mu, ad::Var log_sigma, std::size_t count, Rng& rng) {
  if (count == 0) throw std::invalid_argument("gaussian_sample_reparam: sample count must be at least 1");
  if (mu.shape().size() != 2 || mu.shape() != log_sigma.shape())
    throw std::invalid_argument("gaussian_sample_reparam: mu " + ad::shape_string(mu.shape()) + " vs log_sigma " +
                                ad::shape_string(log_sigma.shape()));
  const std::size_t rows = mu.dim(0) * count, cols = mu.dim(1);
  std::vector<double> eps(rows * cols);
  for (double& e : eps) e = rng.normal();
  auto noise = ad::constant(mu.tape(), {rows, cols}, std::move(eps));
  return repeat_rows(mu, count) + ad::exp(repeat_rows(log_sigma, count)) * noise;
}

ad::Var gaussian_kl_to_standard(ad::Var mu, ad::Var log_sigma) {
  auto terms = ad::square(mu) + ad::exp(2.0 * log_sigma) - 2.0 * log_sigma;
  return ad::scale(ad::sum(terms, 1), 0.5, -0.5 * static_cast<double>(mu.dim(1)));
}

double log_bessel_i(double nu, double x) {
  if (nu < 0.0 || x < 0.0 || std::isnan(x)) throw std::invalid_argument("log_bessel_i: requires nu >= 0 and x >= 0");
  if (x == 0.0) return nu == 0.0 ? 0.0 : -kInf;
  if (x < std::max(0.5 * nu + 10.0, kSeriesLimit)) return log_bessel_series(nu, x);
  return nu * nu < 0.25 * x ? log_bessel_hankel(nu, x) : log_bessel_debye(nu, x);
}

double bessel_ratio(double nu, double x) {
  if (x == 0.0) return 0.0;
  return std::exp(log_bessel_i(nu + 1.0, x) - log_bessel_i(nu, x));
}

double uniform_sphere_log_density(std::size_t dim) {
  const double half = 0.5 * static_cast<double>(dim);
  return std::lgamma(half) - std::numbers::ln2 - half * std::log(std::numbers::pi);
}

double vmf_log_norm_const(std::size_t dim, double kappa) {
  if (dim < 2) throw std::invalid_argument("vmf_log_norm_const: dimension must be at least 2");
  if (!(kappa >= 0.0)) throw std::invalid_argument("vmf_log_norm_const: kappa must be non-negative");
  if (kappa == 0.0) return uniform_sphere_log_density(dim);
  const double half = 0.5 * static_cast<double>(dim);
  const double nu = half - 1.0;
  return nu * std::log(kappa) - half * kLogTwoPi - log_bessel_i(nu, kappa);
}

double vmf_mean_resultant_length(std::size_t dim, double kappa) {
  return bessel_ratio(0.5 * static_cast<double>(dim) - 1.0, kappa);
}

std::vector<double> checked_unit(std::span<const double> z) {
  double n2 = 0.0;
  for (double v : z) n2 += v * v;
  const double norm = std::sqrt(n2);
  std::vector<double> out(z.begin(), z.end());
  const double dev = std::abs(norm - 1.0);
  if (dev <= 1e-6) return out;
  if (dev > 1e-3 || !std::isfinite(norm))
    throw std::invalid_argument("vMF input is not unit norm (|z| = " + std::to_string(norm) + ")");
  for (double& v : out) v /= norm;
  return out;
}

double vmf_log_pdf(const VmfPosterior& post, std::span<const double> z) {
  post.validate();
  require_dim(z.size(), post.dim(), "vmf_log_pdf");
  const auto unit = checked_unit(z);
  double dot = 0.0;
  for (std::size_t i = 0; i < unit.size(); ++i) dot += post.mu_dir[i] * unit[i];
  return vmf_log_norm_const(post.dim(), post.kappa) + post.kappa * dot;
}

double vmf_kl_to_uniform(std::size_t dim, double kappa) {
  if (!(kappa >= 0.0)) throw std::invalid_argument("vmf_kl_to_uniform: kappa must be non-negative");
  if (kappa == 0.0) return 0.0;
  return kappa * vmf_mean_resultant_length(dim, kappa) + vmf_log_norm_const(dim, kappa) -
         uniform_sphere_log_density(dim);
}

Matrix vmf_sample_north_pole(std::size_t dim, double kappa, std::size_t count, Rng& rng) {
  if (dim < 2) throw std::invalid_argument("vmf_sample: dimension must be at least 2");
  if (!(kappa >= 0.0)) throw std::invalid_argument("vmf_sample: kappa must be non-negative");
  if (count == 0) throw std::invalid_argument("vmf_sample: sample count must be at least 1");
  const double m1 = static_cast<double>(dim) - 1.0;
  // Wood (1994) envelope parameters in a cancellation-free form.
  const double b = m1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + m1 * m1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double log_one_minus_x0sq = std::log(4.0 * b) - 2.0 * std::log1p(b);
  const double c = kappa * x0 + m1 * log_one_minus_x0sq;

  Matrix out(count, dim);
  for (std::size_t s = 0; s < count; ++s) {
    double w = 0.0;
    for (;;) {
      const double zb = rng.beta(0.5 * m1, 0.5 * m1);
      w = (1.0 - (1.0 + b) * zb) / (1.0 - (1.0 - b) * zb);
      const double u = rng.uniform();
      if (kappa * w + m1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
    }
    double n2 = 0.0;
    for (std::size_t i = 1; i < dim; ++i) {
      out(s, i) = rng.normal();
      n2 += out(s, i) * out(s, i);
    }
    const double radial = std::sqrt(std::max(0.0, 1.0 - w * w)) / std::sqrt(n2);
    out(s, 0) = w;
    for (std::size_t i = 1; i < dim; ++i) out(s, i) *= radial;
  }
  return out;
}

Matrix vmf_sample(const VmfPosterior& post, std::size_t count, Rng& rng) {
  post.validate();
  Matrix out = vmf_sample_north_pole(post.dim(), post.kappa, count, rng);
  std::vector<double> u(post.mu_dir.begin(), post.mu_dir.end());
  for (double& v : u) v = -v;
  u[0] += 1.0;
  double uu = 0.0;
  for (double v : u) uu += v * v;
  if (uu < 1e-300) return out;
  for (std::size_t s = 0; s < count; ++s) {
    auto row = out.row(s);
    double ux = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) ux += u[i] * row[i];
    const double coef = 2.0 * ux / uu;
    for (std::size_t i = 0; i < row.size(); ++i) row[i] -= coef * u[i];
  }
  return out;
}

ad::Var normalize_rows(ad::Var x) {
  auto inv_norm = ad::exp(-0.5 * ad::log(ad::sum(ad::square(x), 1)));
  return x * ad::reshape(inv_norm, {x.dim(0), 1});
}

ad::Var vmf_sample_reparam(ad::Var mu_dir, double kappa, std::size_t count, Rng& rng) {
  if (mu_dir.shape().size() != 2) throw std::invalid_argument("vmf_sample_reparam: mu_dir must be [B, D]");
  const std::size_t dim = mu_dir.dim(1);
  const std::size_t rows = mu_dir.dim(0) * count;
  Matrix north = vmf_sample_north_pole(dim, kappa, rows, rng);
  ad::Tape& tape = mu_dir.tape();
  auto x = ad::constant(tape, {rows, dim}, std::move(north.data));
  std::vector<double> e1(dim, 0.0);
  e1[0] = 1.0;
  auto u = ad::constant(tape, {1, dim}, std::move(e1)) - repeat_rows(mu_dir, count);
  auto uu = ad::sum(ad::square(u), 1) + 1e-300;
  auto ux = ad::sum(u * x, 1);
  auto coef = 2.0 * ux * ad::exp(-ad::log(uu));
  return x - u * ad::reshape(coef, {rows, 1});
}

}  // namespace dgvae::dist
