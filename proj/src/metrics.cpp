#include "dgvae/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "dgvae/densitygap.hpp"

namespace dgvae::metrics {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

dist::PriorSpec prior_of(const model::PosteriorDump& dump) {
  return {dump.family == dist::Family::kVmf ? dist::PriorKind::kUniformSphere : dist::PriorKind::kStandardNormal,
          dump.mu.cols};
}

dist::GaussianPosterior gaussian_row(const model::PosteriorDump& dump, std::size_t n) {
  auto mu = dump.mu.row(n);
  auto ls = dump.log_sigma.row(n);
  return {{mu.begin(), mu.end()}, {ls.begin(), ls.end()}};
}

dist::VmfPosterior vmf_row(const model::PosteriorDump& dump, std::size_t n) {
  auto mu = dump.mu.row(n);
  return {{mu.begin(), mu.end()}, dump.kappa};
}

// Mean posterior center E_q[z|x] for row n.
std::vector<double> center(const model::PosteriorDump& dump, std::size_t n) {
  auto mu = dump.mu.row(n);
  std::vector<double> c(mu.begin(), mu.end());
  if (dump.family == dist::Family::kVmf) {
    const double a = dist::vmf_mean_resultant_length(dump.mu.cols, dump.kappa);
    for (double& v : c) v *= a;
  }
  return c;
}

void draw_prior(const dist::PriorSpec& prior, std::span<double> out, Rng& rng) {
  for (double& v : out) v = rng.normal();
  if (prior.kind == dist::PriorKind::kUniformSphere) {
    double s = 0.0;
    for (double v : out) s += v * v;
    const double inv = 1.0 / std::sqrt(s);
    for (double& v : out) v *= inv;
  }
}

// Log prior density computed through the same path as a posterior equal to the prior.
double prior_log_density(const dist::PriorSpec& prior, std::span<const double> z) {
  if (prior.kind == dist::PriorKind::kUniformSphere) return dist::uniform_sphere_log_density(prior.dim);
  dist::GaussianPosterior std_normal{std::vector<double>(prior.dim, 0.0), std::vector<double>(prior.dim, 0.0)};
  return dist::gaussian_log_pdf(std_normal, z);
}

void check_dump(const model::PosteriorDump& dump) {
  if (dump.mu.rows == 0) throw std::invalid_argument("metrics: empty eval set");
  if (dump.family == dist::Family::kGaussian &&
      (dump.log_sigma.rows != dump.mu.rows || dump.log_sigma.cols != dump.mu.cols))
    throw std::invalid_argument("metrics: Gaussian dump needs log_sigma matching mu");
}

// Rows per likelihood call.
constexpr std::size_t kRowBudget = 2048;

}  // namespace

std::string MetricsReport::csv_header() {
  return "prior_ll,prior_ll_se,post_ll,post_ll_se,kl,mi,mi_se,au,cu,n_eval,mi_chunk";
}

std::string MetricsReport::csv_row() const {
  return fmt(prior_ll) + "," + fmt(prior_ll_se) + "," + fmt(post_ll) + "," + fmt(post_ll_se) + "," + fmt(kl) + "," +
         fmt(mi) + "," + fmt(mi_se) + "," + std::to_string(au) + "," + (cu ? std::to_string(*cu) : "") + "," +
         std::to_string(n_eval) + "," + std::to_string(mi_chunk);
}

double log_mean_exp(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("log_mean_exp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  if (std::isinf(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s / static_cast<double>(v.size()));
}

Estimate mean_and_se(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean_and_se: empty input");
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() == 1) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

double kl_metric(const model::PosteriorDump& dump) {
  check_dump(dump);
  if (dump.family == dist::Family::kVmf) return dist::vmf_kl_to_uniform(dump.mu.cols, dump.kappa);
  double s = 0.0;
  for (std::size_t n = 0; n < dump.mu.rows; ++n) s += dist::gaussian_kl_to_standard(gaussian_row(dump, n));
  return s / static_cast<double>(dump.mu.rows);
}

MiDecomposition mi_metric(const model::PosteriorDump& dump, std::size_t chunk, std::size_t samples_per_point,
                          Rng& rng) {
  check_dump(dump);
  if (chunk == 0 || samples_per_point == 0) throw std::invalid_argument("mi_metric: chunk and samples must be positive");
  const std::size_t n = dump.mu.rows, D = dump.mu.cols;
  const std::size_t k = (n + chunk - 1) / chunk;
  MiDecomposition out;
  double se2 = 0.0;
  std::size_t lo = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t len = n / k + (c < n % k ? 1 : 0);
    ad::Tape tape;
    dg::PosteriorBatch b;
    b.family = dump.family;
    b.prior = prior_of(dump);
    b.mu = ad::constant(tape, {len, D}, {dump.mu.data.begin() + lo * D, dump.mu.data.begin() + (lo + len) * D});
    if (dump.family == dist::Family::kGaussian)
      b.log_sigma = ad::constant(tape, {len, D},
                                 {dump.log_sigma.data.begin() + lo * D, dump.log_sigma.data.begin() + (lo + len) * D});
    b.kappa = dump.kappa;
    auto samples = dg::draw_samples(b, samples_per_point, rng);
    auto terms = dg::mi_per_sample(b, samples, false);
    const double mi = ad::mean(terms).item();
    out.mi.value += mi / static_cast<double>(k);
    const double se = dg::standard_error(terms);
    se2 += se * se;
    out.per_datapoint_kl += dg::per_datapoint_mc_kl(b, samples).item() / static_cast<double>(k);
    out.aggregated_kl += dg::mc_kl_aggregated(b, samples).item() / static_cast<double>(k);
    lo += len;
  }
  out.mi.se = std::sqrt(se2) / static_cast<double>(k);
  return out;
}

std::vector<double> posterior_mean_variance(const model::PosteriorDump& dump) {
  check_dump(dump);
  const std::size_t n = dump.mu.rows, D = dump.mu.cols;
  std::vector<double> mean(D, 0.0), var(D, 0.0);
  std::vector<std::vector<double>> c(n);
  for (std::size_t i = 0; i < n; ++i) {
    c[i] = center(dump, i);
    for (std::size_t d = 0; d < D; ++d) mean[d] += c[i][d] / static_cast<double>(n);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < D; ++d) var[d] += (c[i][d] - mean[d]) * (c[i][d] - mean[d]) / static_cast<double>(n);
  return var;
}

std::size_t active_units(const model::PosteriorDump& dump, double threshold) {
  auto var = posterior_mean_variance(dump);
  return static_cast<std::size_t>(std::count_if(var.begin(), var.end(), [&](double v) { return v > threshold; }));
}

std::optional<std::size_t> consistent_units(const model::PosteriorDump& dump, double mean_tol, double var_tol) {
  check_dump(dump);
  if (dump.family == dist::Family::kVmf) return std::nullopt;
  const std::size_t n = dump.mu.rows, D = dump.mu.cols;
  const auto var = posterior_mean_variance(dump);
  std::size_t cu = 0;
  for (std::size_t d = 0; d < D; ++d) {
    double mean = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mean += dump.mu(i, d) / static_cast<double>(n);
      s2 += std::exp(2.0 * dump.log_sigma(i, d)) / static_cast<double>(n);
    }
    if (std::abs(mean) <= mean_tol && std::abs(var[d] + s2 - 1.0) <= var_tol) ++cu;
  }
  return cu;
}

Estimate prior_ll(const LogLikelihoodFn& loglik, std::size_t n, const dist::PriorSpec& prior, std::size_t samples,
                  Rng& rng) {
  if (n == 0 || samples == 0) throw std::invalid_argument("prior_ll: need datapoints and samples");
  const std::size_t D = prior.dim, per_call = std::max<std::size_t>(1, kRowBudget / samples);
  std::vector<double> per_point(n);
  for (std::size_t lo = 0; lo < n; lo += per_call) {
    const std::size_t hi = std::min(n, lo + per_call);
    Matrix z((hi - lo) * samples, D);
    std::vector<std::size_t> owner(z.rows);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t r = (i - lo) * samples + s;
        draw_prior(prior, z.row(r), rng);
        owner[r] = i;
      }
    const auto ll = loglik(z, owner);
    for (std::size_t i = lo; i < hi; ++i)
      per_point[i] = log_mean_exp(std::span<const double>(ll).subspan((i - lo) * samples, samples));
  }
  return mean_and_se(per_point);
}

namespace {

// Rows of z drawn from q(z|x_n) for each datapoint with their log weights
// except the likelihood term.
struct PosteriorDraws {
  Matrix z;
  std::vector<std::size_t> owner;
  std::vector<double> log_prior_minus_q;
};

PosteriorDraws draw_posterior(const model::PosteriorDump& dump, const dist::PriorSpec& prior, std::size_t lo,
                              std::size_t hi, std::size_t samples, Rng& rng) {
  const std::size_t D = dump.mu.cols;
  PosteriorDraws d;
  d.z = Matrix((hi - lo) * samples, D);
  d.owner.resize(d.z.rows);
  d.log_prior_minus_q.resize(d.z.rows);
  for (std::size_t i = lo; i < hi; ++i) {
    Matrix draws;
    if (dump.family == dist::Family::kVmf) {
      draws = dist::vmf_sample(vmf_row(dump, i), samples, rng);
    } else {
      draws = dist::gaussian_sample(gaussian_row(dump, i), samples, rng);
    }
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t r = (i - lo) * samples + s;
      std::copy(draws.row(s).begin(), draws.row(s).end(), d.z.row(r).begin());
      d.owner[r] = i;
      const double lq = dump.family == dist::Family::kVmf ? dist::vmf_log_pdf(vmf_row(dump, i), draws.row(s))
                                                          : dist::gaussian_log_pdf(gaussian_row(dump, i), draws.row(s));
      d.log_prior_minus_q[r] = prior_log_density(prior, draws.row(s)) - lq;
    }
  }
  return d;
}

}  // namespace

Estimate post_ll(const LogLikelihoodFn& loglik, const model::PosteriorDump& dump, const dist::PriorSpec& prior,
                 std::size_t samples, Rng& rng) {
  check_dump(dump);
  if (samples == 0) throw std::invalid_argument("post_ll: need samples");
  const std::size_t n = dump.mu.rows, per_call = std::max<std::size_t>(1, kRowBudget / samples);
  std::vector<double> per_point(n);
  for (std::size_t lo = 0; lo < n; lo += per_call) {
    const std::size_t hi = std::min(n, lo + per_call);
    auto d = draw_posterior(dump, prior, lo, hi, samples, rng);
    auto w = loglik(d.z, d.owner);
    for (std::size_t r = 0; r < w.size(); ++r) w[r] += d.log_prior_minus_q[r];
    for (std::size_t i = lo; i < hi; ++i)
      per_point[i] = log_mean_exp(std::span<const double>(w).subspan((i - lo) * samples, samples));
  }
  return mean_and_se(per_point);
}

std::vector<double> single_sample_elbo(const LogLikelihoodFn& loglik, const model::PosteriorDump& dump,
                                       const dist::PriorSpec& prior, Rng& rng) {
  check_dump(dump);
  auto d = draw_posterior(dump, prior, 0, dump.mu.rows, 1, rng);
  auto w = loglik(d.z, d.owner);
  for (std::size_t r = 0; r < w.size(); ++r) w[r] += d.log_prior_minus_q[r];
  return w;
}

model::PosteriorDump encode_eval(const model::ModelConfig& config, const model::ParameterSet& params,
                                 const obj::BnStats* bn, const EvalSet& data) {
  return data.points ? model::encode_all(config, params, bn, *data.points)
                     : model::encode_all(config, params, bn, data.sequences);
}

LogLikelihoodFn model_log_likelihood(const model::ModelConfig& config, const model::ParameterSet& params,
                                     const EvalSet& data) {
  return [&config, &params, data](const Matrix& z, std::span<const std::size_t> owner) {
    return data.points ? model::log_likelihoods(config, params, z, *data.points, owner)
                       : model::log_likelihoods(config, params, z, data.sequences, owner);
  };
}

MetricsReport evaluate(const model::ModelConfig& config, const model::ParameterSet& params, const obj::BnStats* bn,
                       const EvalSet& data, const MetricsConfig& mc, Rng& rng) {
  const auto dump = encode_eval(config, params, bn, data);
  const auto prior = config.prior();
  const auto loglik = model_log_likelihood(config, params, data);
  MetricsReport r;
  r.n_eval = data.size();
  r.mi_chunk = mc.mi_chunk;
  r.kl = kl_metric(dump);
  const auto mi = mi_metric(dump, mc.mi_chunk, mc.mi_samples_per_point, rng);
  r.mi = mi.mi.value;
  r.mi_se = mi.mi.se;
  r.au = active_units(dump, mc.au_threshold);
  r.cu = consistent_units(dump, mc.cu_mean_tol, mc.cu_var_tol);
  const auto pr = prior_ll(loglik, data.size(), prior, mc.s_prior, rng);
  r.prior_ll = pr.value;
  r.prior_ll_se = pr.se;
  const auto po = post_ll(loglik, dump, prior, mc.s_post, rng);
  r.post_ll = po.value;
  r.post_ll_se = po.se;
  return r;
}

std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_f1(std::span<const Token> candidate, std::span<const Token> reference) {
  if (candidate.empty() && reference.empty()) return 1.0;
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

std::pair<double, double> interpolation_weights(std::size_t i) {
  if (i > 10) throw std::out_of_range("interpolation_weights: index beyond the 11-point grid");
  return {static_cast<double>(10 - i) / 10.0, static_cast<double>(i) / 10.0};
}

std::vector<double> interpolate_latent(std::span<const double> za, std::span<const double> zb, std::size_t i,
                                       bool sphere, bool slerp) {
  if (za.size() != zb.size()) throw std::invalid_argument("interpolate_latent: endpoint dimensions differ");
  const auto [wa, wb] = interpolation_weights(i);
  std::vector<double> z(za.size());
  if (sphere && slerp) {
    double dot = 0.0;
    for (std::size_t d = 0; d < za.size(); ++d) dot += za[d] * zb[d];
    const double theta = std::acos(std::clamp(dot, -1.0, 1.0));
    if (theta > 1e-9) {
      const double s = std::sin(theta);
      const double ca = std::sin(wa * theta) / s, cb = std::sin(wb * theta) / s;
      for (std::size_t d = 0; d < z.size(); ++d) z[d] = ca * za[d] + cb * zb[d];
      return z;
    }
  }
  for (std::size_t d = 0; d < z.size(); ++d) z[d] = wa * za[d] + wb * zb[d];
  if (sphere) {
    double s = 0.0;
    for (double v : z) s += v * v;
    if (s > 0.0) {
      const double inv = 1.0 / std::sqrt(s);
      for (double& v : z) v *= inv;
    } else {
      z.assign(za.begin(), za.end());
    }
  }
  return z;
}

InterpolationResult interpolate(const model::ModelConfig& config, const model::ParameterSet& params,
                                const obj::BnStats* bn, const TokenSequence& x_a, const TokenSequence& x_b,
                                bool slerp) {
  std::vector<TokenSequence> ends{x_a, x_b};
  const auto dump = model::encode_all(config, params, bn, ends);
  const bool sphere = config.family == dist::Family::kVmf;
  Matrix z(11, config.latent);
  InterpolationResult out;
  for (std::size_t i = 0; i < 11; ++i) {
    out.lambdas[i] = interpolation_weights(i).second;
    auto zi = interpolate_latent(dump.mu.row(0), dump.mu.row(1), i, sphere, slerp);
    std::copy(zi.begin(), zi.end(), z.row(i).begin());
  }
  out.decoded = model::greedy_decode(config, params, z, config.max_len);
  const auto a = model::strip_markers(x_a), b = model::strip_markers(x_b);
  for (std::size_t i = 0; i < 11; ++i) {
    const auto x = model::strip_markers(out.decoded[i]);
    out.scores[i] = 0.5 * (rouge_l_f1(x, a) + rouge_l_f1(x, b));
  }
  return out;
}

Histogram posterior_histograms(const model::PosteriorDump& dump, std::optional<std::pair<std::size_t, std::size_t>> dims,
                               std::size_t bins, double lo, double hi, Rng& rng, std::size_t vmf_samples) {
  check_dump(dump);
  if (bins == 0 || !(hi > lo)) throw std::invalid_argument("posterior_histograms: need bins > 0 and hi > lo");
  const std::size_t n = dump.mu.rows, D = dump.mu.cols;
  Histogram h;
  h.bins = bins;
  h.lo = lo;
  h.hi = hi;
  if (dims) {
    if (dims->first >= D || dims->second >= D || dims->first == dims->second)
      throw std::invalid_argument("posterior_histograms: dims must be two distinct latent dimensions");
    h.dims = *dims;
  } else if (D >= 2) {
    const auto var = posterior_mean_variance(dump);
    std::vector<std::size_t> order(D);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return var[a] > var[b]; });
    h.dims = {order[0], order[1]};
  } else {
    throw std::invalid_argument("posterior_histograms: need at least two latent dimensions");
  }
  const double width = (hi - lo) / static_cast<double>(bins), area = h.cell_area();
  auto cell = [&](double v) -> std::optional<std::size_t> {
    if (!(v >= lo) || !(v < hi)) return std::nullopt;
    return std::min(bins - 1, static_cast<std::size_t>((v - lo) / width));
  };
  h.aggregated.assign(bins * bins, 0.0);
  h.centers.assign(bins * bins, 0.0);
  const auto [di, dj] = h.dims;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto c = center(dump, p);
    auto ci = cell(c[di]), cj = cell(c[dj]);
    if (ci && cj) h.centers[*ci * bins + *cj] += inv_n / area;
  }
  if (dump.family == dist::Family::kGaussian) {
    std::vector<double> px(bins), py(bins);
    auto masses = [&](double mu, double sigma, std::vector<double>& out) {
      auto cdf = [&](double x) { return 0.5 * std::erfc(-(x - mu) / (sigma * std::numbers::sqrt2)); };
      double prev = cdf(lo);
      for (std::size_t b = 0; b < bins; ++b) {
        const double next = cdf(lo + static_cast<double>(b + 1) * width);
        out[b] = next - prev;
        prev = next;
      }
    };
    for (std::size_t p = 0; p < n; ++p) {
      masses(dump.mu(p, di), std::exp(dump.log_sigma(p, di)), px);
      masses(dump.mu(p, dj), std::exp(dump.log_sigma(p, dj)), py);
      for (std::size_t a = 0; a < bins; ++a) {
        if (px[a] == 0.0) continue;
        const double scale = px[a] * inv_n / area;
        for (std::size_t b = 0; b < bins; ++b) h.aggregated[a * bins + b] += scale * py[b];
      }
    }
  } else {
    const double w = inv_n / static_cast<double>(vmf_samples) / area;
    for (std::size_t p = 0; p < n; ++p) {
      auto draws = dist::vmf_sample(vmf_row(dump, p), vmf_samples, rng);
      for (std::size_t s = 0; s < vmf_samples; ++s) {
        auto ci = cell(draws(s, di)), cj = cell(draws(s, dj));
        if (ci && cj) h.aggregated[*ci * bins + *cj] += w;
      }
    }
  }
  return h;
}

void write_histogram(const Histogram& h, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "dim_x,dim_y,x,y,aggregated_density,center_density\n";
  for (std::size_t a = 0; a < h.bins; ++a)
    for (std::size_t b = 0; b < h.bins; ++b)
      out << h.dims.first << ',' << h.dims.second << ',' << fmt(h.cell_center(a)) << ',' << fmt(h.cell_center(b)) << ','
          << fmt(h.aggregated[a * h.bins + b]) << ',' << fmt(h.centers[a * h.bins + b]) << '\n';
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

}  // namespace dgvae::metrics
