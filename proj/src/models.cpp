#include "dgvae/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Core>

namespace dgvae::model {

namespace {

using ad::Var;

void check_family_and_mode(const ModelConfig& config, Mode mode, const char* what) {
  if (config.mode != mode)
    throw std::invalid_argument(std::string(what) + (mode == Mode::kSequence ? ": model is not in sequence mode"
                                                                             : ": model is not in continuous mode"));
}

// [rows, V] one-hot rows scaled by an optional per-row weight.
Var one_hot(ad::Tape& tape, std::span<const Token> ids, std::size_t vocab, std::span<const double> weight = {}) {
  std::vector<double> v(ids.size() * vocab, 0.0);
  for (std::size_t r = 0; r < ids.size(); ++r) v[r * vocab + ids[r]] = weight.empty() ? 1.0 : weight[r];
  return ad::constant(tape, {ids.size(), vocab}, std::move(v));
}

Var posterior_heads_mu(const ModelConfig& config, const Bound& p, Var h) {
  return config.family == dist::Family::kVmf ? ad::matmul(h, p["enc.dir.w"]) + p["enc.dir.b"]
                                             : ad::matmul(h, p["enc.mu.w"]) + p["enc.mu.b"];
}

dg::PosteriorBatch heads(const ModelConfig& config, const Bound& p, Var h, EncodeOptions options) {
  dg::PosteriorBatch out;
  out.family = config.family;
  out.prior = config.prior();
  if (config.family == dist::Family::kVmf) {
    out.mu = dist::normalize_rows(posterior_heads_mu(config, p, h));
    out.kappa = config.kappa;
    return out;
  }
  Var mu = posterior_heads_mu(config, p, h);
  if (config.batch_norm) {
    if (options.bn_stats == nullptr) throw std::invalid_argument("encode: batch-norm model needs BN statistics");
    mu = obj::bn_transform(mu, p["bn.bias"], config.bn_gamma, *options.bn_stats, options.train);
  }
  out.mu = mu;
  out.log_sigma = ad::matmul(h, p["enc.ls.w"]) + p["enc.ls.b"];
  return out;
}

struct Entry {
  std::string name;
  ad::Shape shape;
};

std::vector<Entry> layout(const ModelConfig& c) {
  const std::size_t V = c.vocab, E = c.embed, H = c.hidden, D = c.latent, G = 3 * c.hidden;
  std::vector<Entry> out;
  if (c.mode == Mode::kSequence) {
    out = {{"enc.embed", {V, E}}, {"enc.wx", {E, G}}, {"enc.wh", {H, G}}, {"enc.b", {G}}};
  } else {
    out = {{"enc.w1", {c.obs_dim, H}}, {"enc.b1", {H}}};
  }
  if (c.family == dist::Family::kVmf) {
    out.push_back({"enc.dir.w", {H, D}});
    out.push_back({"enc.dir.b", {D}});
  } else {
    out.push_back({"enc.mu.w", {H, D}});
    out.push_back({"enc.mu.b", {D}});
    out.push_back({"enc.ls.w", {H, D}});
    out.push_back({"enc.ls.b", {D}});
    if (c.batch_norm) out.push_back({"bn.bias", {D}});
  }
  if (c.mode == Mode::kSequence) {
    out.push_back({"dec.z.w", {D, H}});
    out.push_back({"dec.z.b", {H}});
    out.push_back({"dec.embed", {V, E}});
    out.push_back({"dec.wx", {E, G}});
    out.push_back({"dec.wh", {H, G}});
    out.push_back({"dec.b", {G}});
    if (c.feed_latent) out.push_back({"dec.lat.w", {D, G}});
    out.push_back({"dec.out.w", {H, V}});
    out.push_back({"dec.out.b", {V}});
  } else {
    out.push_back({"dec.w1", {D, H}});
    out.push_back({"dec.b1", {H}});
    out.push_back({"dec.w2", {H, c.obs_dim}});
    out.push_back({"dec.b2", {c.obs_dim}});
  }
  return out;
}

// Decoder state and input contributions shared by teacher forcing and greedy decoding.
struct DecoderStart {
  Var h;
  Var latent_gates;  // invalid unless feed_latent
};

DecoderStart decoder_start(const ModelConfig& config, const Bound& p, Var z) {
  DecoderStart s;
  s.h = ad::tanh(ad::matmul(z, p["dec.z.w"]) + p["dec.z.b"]);
  if (config.feed_latent) s.latent_gates = ad::matmul(z, p["dec.lat.w"]);
  return s;
}

Var input_gates(const Bound& p, Var onehot) {
  return ad::matmul(ad::matmul(onehot, p["dec.embed"]), p["dec.wx"]) + p["dec.b"];
}

void check_latent(const ModelConfig& config, Var z, std::size_t rows, const char* what) {
  if (z.shape().size() != 2 || z.dim(1) != config.latent)
    throw std::invalid_argument(std::string(what) + ": z must have shape [R, " + std::to_string(config.latent) +
                                "], got " + ad::shape_string(z.shape()));
  if (z.dim(0) != rows)
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(z.dim(0)) + " latent rows for " +
                                std::to_string(rows) + " targets");
}

}  // namespace

void ModelConfig::validate() const {
  if (latent < 1) throw std::invalid_argument("model: latent dimension must be at least 1");
  if (hidden < 1) throw std::invalid_argument("model: hidden size must be at least 1");
  if (mode == Mode::kSequence) {
    if (vocab < 3) throw std::invalid_argument("model: vocab must hold the two markers and a word");
    if (embed < 1) throw std::invalid_argument("model: embedding size must be at least 1");
    if (max_len < 2) throw std::invalid_argument("model: max_len must be at least 2");
  } else {
    if (obs_dim < 1) throw std::invalid_argument("model: obs_dim must be at least 1");
    if (!(sigma_obs > 0.0)) throw std::invalid_argument("model: sigma_obs must be positive");
    if (feed_latent) throw std::invalid_argument("model: feed_latent applies to sequence mode only");
  }
  if (!(kappa >= 0.0)) throw std::invalid_argument("model: kappa must be non-negative");
  if (!(init_scale >= 0.0)) throw std::invalid_argument("model: init_scale must be non-negative");
  if (batch_norm && family == dist::Family::kVmf) throw std::invalid_argument("model: batch norm needs Gaussian posteriors");
  if (batch_norm && !(bn_gamma > 0.0)) throw std::invalid_argument("model: bn_gamma must be positive");
  if (family == dist::Family::kVmf && latent < 2) throw std::invalid_argument("model: vMF needs latent >= 2");
}

dist::PriorSpec ModelConfig::prior() const {
  return {family == dist::Family::kVmf ? dist::PriorKind::kUniformSphere : dist::PriorKind::kStandardNormal, latent};
}

void ParameterSet::add(std::string name, ad::Shape shape, std::vector<double> values) {
  if (contains(name)) throw std::invalid_argument("parameters: duplicate tensor '" + name + "'");
  if (values.size() != ad::numel(shape))
    throw std::invalid_argument("parameters: tensor '" + name + "' has " + std::to_string(values.size()) +
                                " values for shape " + ad::shape_string(shape));
  names_.push_back(std::move(name));
  tensors_.push_back({std::move(shape), std::move(values)});
}

bool ParameterSet::contains(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ParameterSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw std::out_of_range("parameters: no tensor named '" + std::string(name) + "'");
}

const Tensor& ParameterSet::at(std::string_view name) const { return tensors_[index_of(name)]; }
Tensor& ParameterSet::at(std::string_view name) { return tensors_[index_of(name)]; }

std::size_t ParameterSet::total_values() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.values.size();
  return n;
}

bool operator==(const ParameterSet& a, const ParameterSet& b) {
  if (a.names_ != b.names_) return false;
  for (std::size_t i = 0; i < a.tensors_.size(); ++i)
    if (a.tensors_[i].shape != b.tensors_[i].shape || a.tensors_[i].values != b.tensors_[i].values) return false;
  return true;
}

ParameterSet initialize(const ModelConfig& config, Rng& rng) {
  config.validate();
  ParameterSet out;
  for (const auto& e : layout(config)) {
    std::vector<double> v(ad::numel(e.shape));
    for (double& x : v) x = config.init_scale * (2.0 * rng.uniform() - 1.0);
    out.add(e.name, e.shape, std::move(v));
  }
  return out;
}

Bound bind(ad::Tape& tape, const ParameterSet& params, bool trainable) {
  Bound b;
  b.params = &params;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensor(i);
    b.vars.push_back(trainable ? ad::parameter(tape, t.shape, t.values) : ad::constant(tape, t.shape, t.values));
  }
  return b;
}

SequenceBatch make_batch(std::span<const TokenSequence> sequences, std::size_t vocab) {
  SequenceBatch b;
  b.size = sequences.size();
  if (b.size == 0) throw std::invalid_argument("make_batch: empty batch");
  for (const auto& s : sequences) {
    if (s.size() < 2) throw std::invalid_argument("make_batch: sequences need at least two tokens");
    for (Token t : s)
      if (t >= vocab)
        throw std::invalid_argument("make_batch: token " + std::to_string(t) + " outside vocab of size " +
                                    std::to_string(vocab));
    b.steps = std::max(b.steps, s.size());
    b.lengths.push_back(s.size());
  }
  b.tokens.assign(b.steps * b.size, kEos);
  for (std::size_t n = 0; n < b.size; ++n)
    for (std::size_t t = 0; t < sequences[n].size(); ++t) b.tokens[t * b.size + n] = sequences[n][t];
  return b;
}

SequenceBatch repeat(const SequenceBatch& batch, std::size_t count) {
  if (count == 1) return batch;
  SequenceBatch out;
  out.size = batch.size * count;
  out.steps = batch.steps;
  out.tokens.resize(out.size * out.steps);
  for (std::size_t n = 0; n < batch.size; ++n)
    for (std::size_t m = 0; m < count; ++m) {
      out.lengths.push_back(batch.lengths[n]);
      for (std::size_t t = 0; t < batch.steps; ++t) out.tokens[t * out.size + n * count + m] = batch.at(t, n);
    }
  return out;
}

Var gru_step(Var gx, Var h, Var wh) {
  const std::size_t H = h.dim(1);
  if (gx.shape().size() != 2 || gx.dim(1) != 3 * H || wh.shape() != ad::Shape{H, 3 * H})
    throw std::invalid_argument("gru_step: expected gx [B, 3H], h [B, H], wh [H, 3H]");
  Var gh = ad::matmul(h, wh);
  Var r = ad::sigmoid(ad::slice(gx, 1, 0, H) + ad::slice(gh, 1, 0, H));
  Var u = ad::sigmoid(ad::slice(gx, 1, H, 2 * H) + ad::slice(gh, 1, H, 2 * H));
  Var n = ad::tanh(ad::slice(gx, 1, 2 * H, 3 * H) + r * ad::slice(gh, 1, 2 * H, 3 * H));
  return n + u * (h - n);
}

Var log_softmax(Var logits) {
  if (logits.shape().size() != 2) throw std::invalid_argument("log_softmax: expected [N, V] logits");
  return logits - ad::reshape(ad::logsumexp(logits, 1), {logits.dim(0), 1});
}

dg::PosteriorBatch encode(const ModelConfig& config, const Bound& p, const SequenceBatch& batch,
                          EncodeOptions options) {
  check_family_and_mode(config, Mode::kSequence, "encode");
  ad::Tape& tape = p.vars.front().tape();
  const std::size_t B = batch.size, H = config.hidden;
  for (Token t : batch.tokens)
    if (t >= config.vocab) throw std::invalid_argument("encode: token " + std::to_string(t) + " outside vocab");
  Var gx = ad::matmul(ad::matmul(one_hot(tape, batch.tokens, config.vocab), p["enc.embed"]), p["enc.wx"]) + p["enc.b"];
  Var h = ad::constant(tape, {B, H}, std::vector<double>(B * H, 0.0));
  for (std::size_t t = 0; t < batch.steps; ++t) {
    Var next = gru_step(ad::slice(gx, 0, t * B, (t + 1) * B), h, p["enc.wh"]);
    bool all_active = true;
    std::vector<double> mask(B * H, 1.0);
    for (std::size_t n = 0; n < B; ++n)
      if (!batch.active(t, n)) {
        all_active = false;
        std::fill_n(mask.begin() + n * H, H, 0.0);
      }
    h = all_active ? next : h + ad::constant(tape, {B, H}, std::move(mask)) * (next - h);
  }
  return heads(config, p, h, options);
}

dg::PosteriorBatch encode(const ModelConfig& config, const Bound& p, const Matrix& points, EncodeOptions options) {
  check_family_and_mode(config, Mode::kContinuous, "encode");
  if (points.cols != config.obs_dim)
    throw std::invalid_argument("encode: points have " + std::to_string(points.cols) + " columns, model expects " +
                                std::to_string(config.obs_dim));
  ad::Tape& tape = p.vars.front().tape();
  Var x = ad::constant(tape, {points.rows, points.cols}, points.data);
  Var h = ad::tanh(ad::matmul(x, p["enc.w1"]) + p["enc.b1"]);
  return heads(config, p, h, options);
}

Var decode_log_likelihood(const ModelConfig& config, const Bound& p, Var z, const SequenceBatch& targets) {
  check_family_and_mode(config, Mode::kSequence, "decode_log_likelihood");
  check_latent(config, z, targets.size, "decode_log_likelihood");
  ad::Tape& tape = z.tape();
  const std::size_t R = targets.size, T = targets.steps, V = config.vocab;
  auto start = decoder_start(config, p, z);
  std::vector<Token> inputs(targets.tokens.begin(), targets.tokens.begin() + (T - 1) * R);
  Var gx = input_gates(p, one_hot(tape, inputs, V));
  Var h = start.h;
  std::vector<Var> states;
  states.reserve(T - 1);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Var g = ad::slice(gx, 0, t * R, (t + 1) * R);
    if (start.latent_gates.valid()) g = g + start.latent_gates;
    h = gru_step(g, h, p["dec.wh"]);
    states.push_back(h);
  }
  Var hs = states.size() == 1 ? states.front() : ad::concat(states, 0);
  Var logp = log_softmax(ad::matmul(hs, p["dec.out.w"]) + p["dec.out.b"]);
  std::vector<Token> next(targets.tokens.begin() + R, targets.tokens.end());
  std::vector<double> valid(next.size());
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t n = 0; n < R; ++n) valid[(t - 1) * R + n] = targets.active(t, n) ? 1.0 : 0.0;
  Var picked = ad::sum(logp * one_hot(tape, next, V, valid), 1);
  return ad::sum(ad::reshape(picked, {T - 1, R}), 0);
}

Var decode_log_likelihood(const ModelConfig& config, const Bound& p, Var z, const Matrix& targets) {
  check_family_and_mode(config, Mode::kContinuous, "decode_log_likelihood");
  check_latent(config, z, targets.rows, "decode_log_likelihood");
  if (targets.cols != config.obs_dim) throw std::invalid_argument("decode_log_likelihood: target width mismatch");
  ad::Tape& tape = z.tape();
  Var h = ad::tanh(ad::matmul(z, p["dec.w1"]) + p["dec.b1"]);
  Var mean = ad::matmul(h, p["dec.w2"]) + p["dec.b2"];
  Var x = ad::constant(tape, {targets.rows, targets.cols}, targets.data);
  const double s = config.sigma_obs;
  const double norm = static_cast<double>(config.obs_dim) * (std::log(s) + 0.5 * dist::kLogTwoPi);
  return ad::scale(ad::sum(ad::square(x - mean), 1), -0.5 / (s * s), -norm);
}

std::vector<TokenSequence> greedy_decode(const ModelConfig& config, const ParameterSet& params, const Matrix& z,
                                         std::size_t max_len) {
  check_family_and_mode(config, Mode::kSequence, "greedy_decode");
  ad::Tape tape;
  Bound p = bind(tape, params, false);
  Var zv = ad::constant(tape, {z.rows, z.cols}, z.data);
  check_latent(config, zv, z.rows, "greedy_decode");
  const std::size_t R = z.rows, V = config.vocab;
  auto start = decoder_start(config, p, zv);
  std::vector<TokenSequence> out(R, TokenSequence{kBos});
  std::vector<bool> done(R, max_len <= 1);
  Var h = start.h;
  for (std::size_t step = 1; step < max_len; ++step) {
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
    std::vector<Token> cur(R);
    for (std::size_t r = 0; r < R; ++r) cur[r] = out[r].back();
    Var g = input_gates(p, one_hot(tape, cur, V));
    if (start.latent_gates.valid()) g = g + start.latent_gates;
    h = gru_step(g, h, p["dec.wh"]);
    Var logits = ad::matmul(h, p["dec.out.w"]) + p["dec.out.b"];
    auto lv = logits.values();
    for (std::size_t r = 0; r < R; ++r) {
      if (done[r]) continue;
      Token best = 0;
      for (Token k = 1; k < V; ++k)
        if (lv[r * V + k] > lv[r * V + best]) best = k;
      out[r].push_back(best);
      if (best == kEos) done[r] = true;
    }
  }
  return out;
}

Matrix decode_mean(const ModelConfig& config, const ParameterSet& params, const Matrix& z) {
  check_family_and_mode(config, Mode::kContinuous, "decode_mean");
  ad::Tape tape;
  Bound p = bind(tape, params, false);
  Var zv = ad::constant(tape, {z.rows, z.cols}, z.data);
  check_latent(config, zv, z.rows, "decode_mean");
  Var mean = ad::matmul(ad::tanh(ad::matmul(zv, p["dec.w1"]) + p["dec.b1"]), p["dec.w2"]) + p["dec.b2"];
  return Matrix(z.rows, config.obs_dim, std::vector<double>(mean.values().begin(), mean.values().end()));
}

namespace {

template <class Encode>
PosteriorDump dump_chunks(const ModelConfig& config, const ParameterSet& params, const obj::BnStats* bn_stats,
                          std::size_t n, std::size_t chunk, Encode&& encode_range) {
  if (chunk == 0) throw std::invalid_argument("encode_all: chunk must be positive");
  PosteriorDump out;
  out.family = config.family;
  out.kappa = config.family == dist::Family::kVmf ? config.kappa : 0.0;
  out.mu = Matrix(n, config.latent);
  if (config.family == dist::Family::kGaussian) out.log_sigma = Matrix(n, config.latent);
  obj::BnStats stats = bn_stats ? *bn_stats : obj::BnStats(config.latent);
  for (std::size_t lo = 0; lo < n; lo += chunk) {
    const std::size_t hi = std::min(n, lo + chunk);
    ad::Tape tape;
    Bound p = bind(tape, params, false);
    auto post = encode_range(p, lo, hi, EncodeOptions{false, &stats});
    std::copy(post.mu.values().begin(), post.mu.values().end(), out.mu.data.begin() + lo * config.latent);
    if (post.log_sigma.valid())
      std::copy(post.log_sigma.values().begin(), post.log_sigma.values().end(),
                out.log_sigma.data.begin() + lo * config.latent);
  }
  return out;
}

}  // namespace

PosteriorDump encode_all(const ModelConfig& config, const ParameterSet& params, const obj::BnStats* bn_stats,
                         std::span<const TokenSequence> data, std::size_t chunk) {
  return dump_chunks(config, params, bn_stats, data.size(), chunk,
                     [&](const Bound& p, std::size_t lo, std::size_t hi, EncodeOptions o) {
                       return encode(config, p, make_batch(data.subspan(lo, hi - lo), config.vocab), o);
                     });
}

PosteriorDump encode_all(const ModelConfig& config, const ParameterSet& params, const obj::BnStats* bn_stats,
                         const Matrix& points, std::size_t chunk) {
  return dump_chunks(config, params, bn_stats, points.rows, chunk,
                     [&](const Bound& p, std::size_t lo, std::size_t hi, EncodeOptions o) {
                       Matrix part(hi - lo, points.cols,
                                   std::vector<double>(points.data.begin() + lo * points.cols,
                                                       points.data.begin() + hi * points.cols));
                       return encode(config, p, part, o);
                     });
}

namespace {

template <class Decode>
std::vector<double> likelihood_chunks(const ModelConfig& config, const Matrix& z, std::size_t count,
                                      std::span<const std::size_t> owner, std::size_t chunk, Decode&& decode_rows) {
  if (owner.size() != z.rows) throw std::invalid_argument("log_likelihoods: owner list must match z rows");
  if (z.cols != config.latent) throw std::invalid_argument("log_likelihoods: z width mismatch");
  if (chunk == 0) throw std::invalid_argument("log_likelihoods: chunk must be positive");
  for (std::size_t o : owner)
    if (o >= count) throw std::out_of_range("log_likelihoods: owner index out of range");
  std::vector<double> out(z.rows);
  for (std::size_t lo = 0; lo < z.rows; lo += chunk) {
    const std::size_t hi = std::min(z.rows, lo + chunk);
    ad::Tape tape;
    Var zv = ad::constant(tape, {hi - lo, z.cols},
                          std::vector<double>(z.data.begin() + lo * z.cols, z.data.begin() + hi * z.cols));
    auto ll = decode_rows(tape, zv, owner.subspan(lo, hi - lo));
    std::copy(ll.values().begin(), ll.values().end(), out.begin() + lo);
  }
  return out;
}

}  // namespace

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

RowMatrix as_matrix(const Tensor& t) {
  const std::size_t cols = t.shape.size() == 2 ? t.shape[1] : t.shape[0];
  const std::size_t rows = t.shape.size() == 2 ? t.shape[0] : 1;
  return Eigen::Map<const RowMatrix>(t.values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Teacher-forced log p(x | z) without a tape.
std::vector<double> sequence_log_likelihood_direct(const ModelConfig& config, const ParameterSet& params,
                                                   const Matrix& z, const SequenceBatch& targets) {
  const auto R = static_cast<Eigen::Index>(targets.size);
  const auto H = static_cast<Eigen::Index>(config.hidden);
  const auto V = static_cast<Eigen::Index>(config.vocab);
  const RowMatrix table = (as_matrix(params.at("dec.embed")) * as_matrix(params.at("dec.wx"))).rowwise() +
                          RowVector(as_matrix(params.at("dec.b")));
  const RowMatrix wh = as_matrix(params.at("dec.wh"));
  const RowMatrix wout = as_matrix(params.at("dec.out.w"));
  const RowVector bout = as_matrix(params.at("dec.out.b"));
  const Eigen::Map<const RowMatrix> zm(z.data.data(), R, static_cast<Eigen::Index>(z.cols));
  RowMatrix h = ((zm * as_matrix(params.at("dec.z.w"))).rowwise() + RowVector(as_matrix(params.at("dec.z.b"))))
                    .array()
                    .tanh()
                    .matrix();
  RowMatrix lat;
  if (config.feed_latent) lat = zm * as_matrix(params.at("dec.lat.w"));
  std::vector<double> out(targets.size, 0.0);
  RowMatrix g(R, 3 * H), gh(R, 3 * H), logits(R, V);
  for (std::size_t t = 0; t + 1 < targets.steps; ++t) {
    for (Eigen::Index n = 0; n < R; ++n) g.row(n) = table.row(targets.at(t, static_cast<std::size_t>(n)));
    if (config.feed_latent) g += lat;
    gh.noalias() = h * wh;
    for (Eigen::Index n = 0; n < R; ++n)
      for (Eigen::Index k = 0; k < H; ++k) {
        const double r = sigmoid(g(n, k) + gh(n, k));
        const double u = sigmoid(g(n, H + k) + gh(n, H + k));
        const double c = std::tanh(g(n, 2 * H + k) + r * gh(n, 2 * H + k));
        h(n, k) = c + u * (h(n, k) - c);
      }
    logits.noalias() = h * wout;
    logits.rowwise() += bout;
    for (Eigen::Index n = 0; n < R; ++n) {
      const auto row = static_cast<std::size_t>(n);
      if (!targets.active(t + 1, row)) continue;
      const double m = logits.row(n).maxCoeff();
      const double lse = m + std::log((logits.row(n).array() - m).exp().sum());
      out[row] += logits(n, targets.at(t + 1, row)) - lse;
    }
  }
  return out;
}

}  // namespace

std::vector<double> log_likelihoods(const ModelConfig& config, const ParameterSet& params, const Matrix& z,
                                    std::span<const TokenSequence> data, std::span<const std::size_t> owner,
                                    std::size_t chunk) {
  check_family_and_mode(config, Mode::kSequence, "log_likelihoods");
  if (owner.size() != z.rows) throw std::invalid_argument("log_likelihoods: owner list must match z rows");
  if (z.cols != config.latent) throw std::invalid_argument("log_likelihoods: z width mismatch");
  if (chunk == 0) throw std::invalid_argument("log_likelihoods: chunk must be positive");
  for (std::size_t o : owner)
    if (o >= data.size()) throw std::out_of_range("log_likelihoods: owner index out of range");
  std::vector<double> out(z.rows);
  for (std::size_t lo = 0; lo < z.rows; lo += chunk) {
    const std::size_t hi = std::min(z.rows, lo + chunk);
    std::vector<TokenSequence> seqs;
    seqs.reserve(hi - lo);
    for (std::size_t r = lo; r < hi; ++r) seqs.push_back(data[owner[r]]);
    Matrix part(hi - lo, z.cols, std::vector<double>(z.data.begin() + lo * z.cols, z.data.begin() + hi * z.cols));
    auto ll = sequence_log_likelihood_direct(config, params, part, make_batch(seqs, config.vocab));
    std::copy(ll.begin(), ll.end(), out.begin() + lo);
  }
  return out;
}

std::vector<double> log_likelihoods(const ModelConfig& config, const ParameterSet& params, const Matrix& z,
                                    const Matrix& points, std::span<const std::size_t> owner, std::size_t chunk) {
  return likelihood_chunks(config, z, points.rows, owner, chunk,
                           [&](ad::Tape& tape, Var zv, std::span<const std::size_t> rows) {
                             Matrix x(rows.size(), points.cols);
                             for (std::size_t r = 0; r < rows.size(); ++r)
                               std::copy_n(points.data.begin() + rows[r] * points.cols, points.cols,
                                           x.data.begin() + r * points.cols);
                             Bound p = bind(tape, params, false);
                             return decode_log_likelihood(config, p, zv, x);
                           });
}

TokenSequence strip_markers(std::span<const Token> sequence) {
  TokenSequence out;
  std::size_t i = (!sequence.empty() && sequence[0] == kBos) ? 1 : 0;
  for (; i < sequence.size() && sequence[i] != kEos; ++i) out.push_back(sequence[i]);
  return out;
}

}  // namespace dgvae::model
