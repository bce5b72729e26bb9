#include "dgvae/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "json_util.hpp"

namespace dgvae::train {

namespace {

using namespace jsonutil;

constexpr std::uint64_t kInitTag = 1;
constexpr std::uint64_t kTrainTag = 2;
constexpr std::uint64_t kShuffleTag = 1ull << 32;
constexpr std::uint64_t kEvalTag = 2ull << 32;

constexpr char kMagic[8] = {'D', 'G', 'V', 'A', 'E', 'C', 'K', 'P'};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> known) {
  if (!obj.is_object()) field_error(path.empty() ? "(root)" : path, "expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) field_error((path.empty() ? "" : path + ".") + it.key(), "unknown key");
  }
}

std::string join(const std::string& path, const char* key) { return path.empty() ? key : path + "." + key; }

template <class F>
void maybe(const json& obj, const std::string& path, const char* key, F&& apply) {
  if (obj.contains(key)) apply(obj.at(key), join(path, key));
}

const char* mode_name(obj::Annealing::Mode m) {
  switch (m) {
    case obj::Annealing::Mode::kNone: return "none";
    case obj::Annealing::Mode::kLinear: return "linear";
    case obj::Annealing::Mode::kCyclic: return "cyclic";
  }
  return "none";
}

json model_json(const model::ModelConfig& m) {
  return {{"mode", m.mode == model::Mode::kSequence ? "sequence" : "continuous"},
          {"vocab", m.vocab},
          {"embed", m.embed},
          {"hidden", m.hidden},
          {"latent", m.latent},
          {"obs_dim", m.obs_dim},
          {"max_len", m.max_len},
          {"sigma_obs", m.sigma_obs},
          {"init_scale", m.init_scale},
          {"feed_latent", m.feed_latent}};
}

void parse_model(const json& j, const std::string& path, model::ModelConfig& m) {
  check_keys(j, path, {"mode", "vocab", "embed", "hidden", "latent", "obs_dim", "max_len", "sigma_obs", "init_scale",
                       "feed_latent"});
  maybe(j, path, "mode", [&](const json& v, const std::string& p) {
    const auto s = string(v, p);
    if (s == "sequence") m.mode = model::Mode::kSequence;
    else if (s == "continuous") m.mode = model::Mode::kContinuous;
    else field_error(p, "expected \"sequence\" or \"continuous\"");
  });
  maybe(j, path, "vocab", [&](const json& v, const std::string& p) { m.vocab = count(v, p); });
  maybe(j, path, "embed", [&](const json& v, const std::string& p) { m.embed = count(v, p); });
  maybe(j, path, "hidden", [&](const json& v, const std::string& p) { m.hidden = count(v, p); });
  maybe(j, path, "latent", [&](const json& v, const std::string& p) { m.latent = count(v, p); });
  maybe(j, path, "obs_dim", [&](const json& v, const std::string& p) { m.obs_dim = count(v, p); });
  maybe(j, path, "max_len", [&](const json& v, const std::string& p) { m.max_len = count(v, p); });
  maybe(j, path, "sigma_obs", [&](const json& v, const std::string& p) { m.sigma_obs = number(v, p); });
  maybe(j, path, "init_scale", [&](const json& v, const std::string& p) { m.init_scale = number(v, p); });
  maybe(j, path, "feed_latent", [&](const json& v, const std::string& p) { m.feed_latent = boolean(v, p); });
}

json objective_json(const obj::ObjectiveConfig& o) {
  return {{"kind", obj::kind_name(o.kind)},
          {"beta", o.beta},
          {"lambda_kl", o.lambda_kl},
          {"freebits_per_dim", o.freebits_per_dim},
          {"gamma", o.gamma},
          {"kappa", o.kappa},
          {"aggregation_size", o.aggregation_size},
          {"samples_per_point", o.samples_per_point},
          {"annealing",
           {{"mode", mode_name(o.annealing.mode)},
            {"epochs", o.annealing.epochs},
            {"period", o.annealing.period},
            {"ramp", o.annealing.ramp}}}};
}

void parse_objective(const json& j, const std::string& path, obj::ObjectiveConfig& o) {
  check_keys(j, path, {"kind", "beta", "lambda_kl", "freebits_per_dim", "gamma", "kappa", "aggregation_size",
                       "samples_per_point", "annealing"});
  maybe(j, path, "kind", [&](const json& v, const std::string& p) {
    try {
      o.kind = obj::parse_kind(string(v, p));
    } catch (const std::invalid_argument& e) {
      if (std::string(e.what()).rfind("field ", 0) == 0) throw;
      field_error(p, e.what());
    }
  });
  maybe(j, path, "beta", [&](const json& v, const std::string& p) { o.beta = number(v, p); });
  maybe(j, path, "lambda_kl", [&](const json& v, const std::string& p) { o.lambda_kl = number(v, p); });
  maybe(j, path, "freebits_per_dim", [&](const json& v, const std::string& p) { o.freebits_per_dim = boolean(v, p); });
  maybe(j, path, "gamma", [&](const json& v, const std::string& p) { o.gamma = number(v, p); });
  maybe(j, path, "kappa", [&](const json& v, const std::string& p) { o.kappa = number(v, p); });
  maybe(j, path, "aggregation_size", [&](const json& v, const std::string& p) { o.aggregation_size = count(v, p); });
  maybe(j, path, "samples_per_point", [&](const json& v, const std::string& p) { o.samples_per_point = count(v, p); });
  maybe(j, path, "annealing", [&](const json& a, const std::string& ap) {
    check_keys(a, ap, {"mode", "epochs", "period", "ramp"});
    maybe(a, ap, "mode", [&](const json& v, const std::string& p) {
      const auto s = string(v, p);
      if (s == "none") o.annealing.mode = obj::Annealing::Mode::kNone;
      else if (s == "linear") o.annealing.mode = obj::Annealing::Mode::kLinear;
      else if (s == "cyclic") o.annealing.mode = obj::Annealing::Mode::kCyclic;
      else field_error(p, "expected \"none\", \"linear\" or \"cyclic\"");
    });
    maybe(a, ap, "epochs", [&](const json& v, const std::string& p) { o.annealing.epochs = number(v, p); });
    maybe(a, ap, "period", [&](const json& v, const std::string& p) { o.annealing.period = number(v, p); });
    maybe(a, ap, "ramp", [&](const json& v, const std::string& p) { o.annealing.ramp = number(v, p); });
  });
}

json metrics_json(const metrics::MetricsConfig& m) {
  return {{"mi_chunk", m.mi_chunk},       {"mi_samples_per_point", m.mi_samples_per_point},
          {"au_threshold", m.au_threshold}, {"cu_mean_tol", m.cu_mean_tol},
          {"cu_var_tol", m.cu_var_tol},   {"s_prior", m.s_prior},
          {"s_post", m.s_post}};
}

void parse_metrics(const json& j, const std::string& path, metrics::MetricsConfig& m) {
  check_keys(j, path, {"mi_chunk", "mi_samples_per_point", "au_threshold", "cu_mean_tol", "cu_var_tol", "s_prior",
                       "s_post"});
  maybe(j, path, "mi_chunk", [&](const json& v, const std::string& p) { m.mi_chunk = count(v, p); });
  maybe(j, path, "mi_samples_per_point",
        [&](const json& v, const std::string& p) { m.mi_samples_per_point = count(v, p); });
  maybe(j, path, "au_threshold", [&](const json& v, const std::string& p) { m.au_threshold = number(v, p); });
  maybe(j, path, "cu_mean_tol", [&](const json& v, const std::string& p) { m.cu_mean_tol = number(v, p); });
  maybe(j, path, "cu_var_tol", [&](const json& v, const std::string& p) { m.cu_var_tol = number(v, p); });
  maybe(j, path, "s_prior", [&](const json& v, const std::string& p) { m.s_prior = count(v, p); });
  maybe(j, path, "s_post", [&](const json& v, const std::string& p) { m.s_post = count(v, p); });
}

json config_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"clip_norm", c.clip_norm},
          {"seed", c.seed},
          {"eval_interval", c.eval_interval},
          {"eval_limit", c.eval_limit},
          {"model", model_json(c.model)},
          {"objective", objective_json(c.objective)},
          {"metrics", metrics_json(c.metrics)}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  check_keys(j, "", {"epochs", "batch_size", "lr", "beta1", "beta2", "adam_eps", "clip_norm", "seed", "eval_interval",
                     "eval_limit", "model", "objective", "metrics"});
  const std::string root;
  maybe(j, root, "epochs", [&](const json& v, const std::string& p) { c.epochs = count(v, p); });
  maybe(j, root, "batch_size", [&](const json& v, const std::string& p) { c.batch_size = count(v, p); });
  maybe(j, root, "lr", [&](const json& v, const std::string& p) { c.adam.lr = number(v, p); });
  maybe(j, root, "beta1", [&](const json& v, const std::string& p) { c.adam.beta1 = number(v, p); });
  maybe(j, root, "beta2", [&](const json& v, const std::string& p) { c.adam.beta2 = number(v, p); });
  maybe(j, root, "adam_eps", [&](const json& v, const std::string& p) { c.adam.eps = number(v, p); });
  maybe(j, root, "clip_norm", [&](const json& v, const std::string& p) { c.clip_norm = number(v, p); });
  maybe(j, root, "seed", [&](const json& v, const std::string& p) {
    if (!v.is_number_unsigned()) field_error(p, "expected a non-negative integer");
    c.seed = v.get<std::uint64_t>();
  });
  maybe(j, root, "eval_interval", [&](const json& v, const std::string& p) { c.eval_interval = count(v, p); });
  maybe(j, root, "eval_limit", [&](const json& v, const std::string& p) { c.eval_limit = count(v, p); });
  maybe(j, root, "model", [&](const json& v, const std::string& p) { parse_model(v, p, c.model); });
  maybe(j, root, "objective", [&](const json& v, const std::string& p) { parse_objective(v, p, c.objective); });
  maybe(j, root, "metrics", [&](const json& v, const std::string& p) { parse_metrics(v, p, c.metrics); });
  c.harmonize();
  c.validate();
  return c;
}

// Little-endian byte writer/reader.
class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) {
    if (p > b_.size()) throw std::runtime_error("checkpoint: offset out of range");
    pos_ = p;
  }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

struct Entry {
  std::string name;
  ad::Shape shape;
  const std::vector<double>* values;
};

std::size_t batch_count(std::size_t n, std::size_t b) {
  const std::size_t k = (n + b - 1) / b;
  return k > 1 && n % b == 1 ? k - 1 : k;
}

// Epoch batches with a size-1 remainder folded into the previous batch.
std::vector<std::vector<std::size_t>> batches_for(const TrainConfig& c, std::size_t n, std::size_t epoch) {
  Rng r = Rng::derived(c.seed, kShuffleTag + epoch);
  auto b = corpus::epoch_batches(n, c.batch_size, true, r);
  if (b.size() > 1 && b.back().size() == 1) {
    b[b.size() - 2].push_back(b.back()[0]);
    b.pop_back();
  }
  return b;
}

bool eval_due(const TrainConfig& c, std::size_t completed) {
  if (completed == c.epochs) return true;
  return c.eval_interval > 0 && completed % c.eval_interval == 0;
}

struct StepOutput {
  double total = 0.0;
  double reconstruction = 0.0;
  double regularizer = 0.0;
  double anneal = 1.0;
  Gradients grads;
};

StepOutput step_gradients(const Checkpoint& ck, obj::BnStats* bn, const corpus::Split& split,
                          const std::vector<std::size_t>& rows, Rng& rng) {
  const auto& cfg = ck.config;
  ad::Tape tape;
  auto p = model::bind(tape, ck.params, true);
  const std::size_t M = cfg.objective.samples_per_point;
  model::EncodeOptions opt{true, bn};
  dg::PosteriorBatch post;
  dg::StratifiedSamples samples;
  ad::Var ll;
  if (cfg.model.mode == model::Mode::kSequence) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(rows.size());
    for (auto r : rows) seqs.push_back(split.sequences[r]);
    const auto sb = model::make_batch(seqs, cfg.model.vocab);
    post = model::encode(cfg.model, p, sb, opt);
    samples = dg::draw_samples(post, M, rng);
    ll = model::decode_log_likelihood(cfg.model, p, samples.z, M > 1 ? model::repeat(sb, M) : sb);
  } else {
    const std::size_t d = split.points.cols;
    Matrix x(rows.size(), d), xr(rows.size() * M, d);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) {
        x(i, k) = split.points(rows[i], k);
        for (std::size_t m = 0; m < M; ++m) xr(i * M + m, k) = x(i, k);
      }
    post = model::encode(cfg.model, p, x, opt);
    samples = dg::draw_samples(post, M, rng);
    ll = model::decode_log_likelihood(cfg.model, p, samples.z, xr);
  }
  const auto steps = batch_count(split.size(), cfg.batch_size);
  const double anneal = obj::anneal_weight(cfg.objective.annealing, ck.step, steps);
  const auto loss = obj::objective_loss(cfg.objective, post, samples, obj::reconstruction_term(ll), anneal, rng);
  StepOutput out{loss.total.item(), loss.reconstruction, loss.regularizer, loss.anneal_weight, {}};
  if (!std::isfinite(out.total)) return out;
  auto g = tape.backward(loss.total.id());
  out.grads.resize(p.vars.size());
  for (std::size_t i = 0; i < p.vars.size(); ++i) {
    auto gs = g[p.vars[i].id()];
    if (gs.empty()) out.grads[i].assign(ck.params.tensor(i).values.size(), 0.0);
    else out.grads[i].assign(gs.begin(), gs.end());
  }
  return out;
}

TrainResult run(Checkpoint ck, const corpus::Dataset& data, const Callbacks& cb) {
  const TrainConfig& cfg = ck.config;
  cfg.validate();
  check_compatible(cfg, data);
  const auto& split = data.train;
  if (split.size() == 0) throw std::invalid_argument("train: empty training split");
  TrainResult result;
  Rng rng;
  rng.restore(ck.rng_state);
  while (ck.epoch < cfg.epochs) {
    const auto batches = batches_for(cfg, split.size(), ck.epoch);
    for (; ck.batch < batches.size(); ++ck.batch) {
      const std::string rng_before = rng.state();
      std::optional<obj::BnStats> bn_before = ck.bn;
      auto out = step_gradients(ck, ck.bn ? &*ck.bn : nullptr, split, batches[ck.batch], rng);
      const double total = out.total;
      if (!std::isfinite(total)) {
        Checkpoint last = ck;
        last.bn = std::move(bn_before);
        last.rng_state = rng_before;
        spdlog::error("non-finite loss at step {}", ck.step + 1);
        throw NonFiniteLoss(ck.step + 1, std::move(last));
      }
      LossRow row;
      row.grad_norm = cfg.clip_norm > 0.0 ? clip_gradients(out.grads, cfg.clip_norm) : global_norm(out.grads);
      adam_update(ck.params, ck.adam, out.grads, cfg.adam);
      ++ck.step;
      row.step = ck.step;
      row.epoch = ck.epoch + 1;
      row.loss = total;
      row.reconstruction = out.reconstruction;
      row.regularizer = out.regularizer;
      row.anneal = out.anneal;
      result.losses.push_back(row);
      if (cb.on_step) cb.on_step(row);
    }
    ck.batch = 0;
    ++ck.epoch;
    ck.rng_state = rng.state();
    if (eval_due(cfg, ck.epoch)) {
      Rng er = Rng::derived(cfg.seed, kEvalTag + ck.epoch);
      EvalRow e{ck.epoch, ck.step, evaluate_split(ck, data.valid, cfg.metrics, er, cfg.eval_limit)};
      spdlog::info("epoch {} step {}: kl {:.4f} mi {:.4f} au {} prior_ll {:.3f} post_ll {:.3f}", e.epoch, e.step,
                   e.report.kl, e.report.mi, e.report.au, e.report.prior_ll, e.report.post_ll);
      result.evals.push_back(e);
      if (cb.on_eval) cb.on_eval(e);
    }
    if (cb.on_epoch_end) cb.on_epoch_end(ck);
  }
  ck.rng_state = rng.state();
  result.checkpoint = std::move(ck);
  return result;
}

}  // namespace

void TrainConfig::harmonize() {
  model.family = obj::uses_vmf(objective.kind) ? dist::Family::kVmf : dist::Family::kGaussian;
  model.kappa = objective.kappa;
  model.batch_norm = objective.kind == obj::Kind::kBn;
  model.bn_gamma = objective.gamma;
}

void TrainConfig::validate() const {
  model.validate();
  objective.validate();
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be at least 1");
  if (objective.kind == obj::Kind::kBn && batch_size < 2)
    throw std::invalid_argument("train: the bn objective needs batch_size >= 2");
  if ((model.family == dist::Family::kVmf) != obj::uses_vmf(objective.kind) ||
      model.batch_norm != (objective.kind == obj::Kind::kBn))
    throw std::invalid_argument("train: model posterior settings do not match the objective (call harmonize)");
  if (!(adam.lr >= 0.0)) throw std::invalid_argument("train: lr must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw std::invalid_argument("train: moment coefficients must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw std::invalid_argument("train: adam_eps must be positive");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("train: clip_norm must be non-negative");
  if (metrics.mi_chunk < 1 || metrics.mi_samples_per_point < 1 || metrics.s_prior < 1 || metrics.s_post < 1)
    throw std::invalid_argument("train: metric sample counts must be positive");
}

TrainConfig parse_train_config(const std::string& text) { return config_from_json(parse_located(text)); }

std::string train_config_to_json(const TrainConfig& config) { return config_json(config).dump(2) + "\n"; }

double global_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& v : g)
    for (double x : v) s += x * x;
  return std::sqrt(s);
}

double clip_gradients(Gradients& g, double max_norm) {
  const double norm = global_norm(g);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& v : g)
      for (double& x : v) x *= f;
  }
  return norm;
}

void adam_update(model::ParameterSet& params, AdamState& state, const Gradients& g, const AdamConfig& c) {
  if (g.size() != params.size()) throw std::invalid_argument("adam: gradient count does not match parameters");
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.emplace_back(params.tensor(i).values.size(), 0.0);
      state.v.emplace_back(params.tensor(i).values.size(), 0.0);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(c.beta1, t), c2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params.tensor(i).values;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (g[i].size() != w.size()) throw std::invalid_argument("adam: gradient shape mismatch for " + params.name(i));
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[i][k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[i][k] * g[i][k];
      w[k] -= c.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + c.eps);
    }
  }
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  json meta = {{"config", config_json(ck.config)},
               {"step", ck.step},
               {"epoch", ck.epoch},
               {"batch", ck.batch},
               {"adam_step", ck.adam.step},
               {"rng", ck.rng_state},
               {"bn", ck.bn.has_value()}};
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < ck.params.size(); ++i)
    entries.push_back({"param:" + ck.params.name(i), ck.params.tensor(i).shape, &ck.params.tensor(i).values});
  if (!ck.adam.m.empty()) {
    for (std::size_t i = 0; i < ck.params.size(); ++i)
      entries.push_back({"adam.m:" + ck.params.name(i), ck.params.tensor(i).shape, &ck.adam.m.at(i)});
    for (std::size_t i = 0; i < ck.params.size(); ++i)
      entries.push_back({"adam.v:" + ck.params.name(i), ck.params.tensor(i).shape, &ck.adam.v.at(i)});
  }
  if (ck.bn) {
    entries.push_back({"bn.mean", {ck.bn->running_mean.size()}, &ck.bn->running_mean});
    entries.push_back({"bn.var", {ck.bn->running_var.size()}, &ck.bn->running_var});
  }
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(Checkpoint::kVersion);
  w.str32(meta.dump());
  w.u64(entries.size());
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    w.str32(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(d);
    w.u64(offset);
    offset += e.values->size() * 8;
  }
  for (const auto& e : entries)
    for (double v : *e.values) w.f64(v);
  return std::move(w.bytes());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != Checkpoint::kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  json meta;
  try {
    meta = json::parse(r.str(r.u32()));
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad metadata: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = config_from_json(meta.at("config"));
    ck.step = meta.at("step").get<std::size_t>();
    ck.epoch = meta.at("epoch").get<std::size_t>();
    ck.batch = meta.at("batch").get<std::size_t>();
    ck.adam.step = meta.at("adam_step").get<std::size_t>();
    ck.rng_state = meta.at("rng").get<std::string>();
    if (meta.at("bn").get<bool>()) ck.bn.emplace();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad metadata: ") + e.what());
  }
  struct Dir {
    std::string name;
    ad::Shape shape;
    std::uint64_t offset;
  };
  std::vector<Dir> dir(r.u64());
  for (auto& d : dir) {
    d.name = r.str(r.u32());
    d.shape.resize(r.u32());
    for (auto& s : d.shape) s = r.u64();
    d.offset = r.u64();
  }
  const std::size_t payload = r.pos();
  auto read_values = [&](const Dir& d) {
    r.seek(payload + d.offset);
    std::vector<double> v(ad::numel(d.shape));
    for (double& x : v) x = r.f64();
    return v;
  };
  Rng dummy;
  const auto layout = model::initialize(ck.config.model, dummy);
  for (const auto& d : dir) {
    if (d.name.rfind("param:", 0) == 0) ck.params.add(d.name.substr(6), d.shape, read_values(d));
    else if (d.name.rfind("adam.m:", 0) == 0) ck.adam.m.push_back(read_values(d));
    else if (d.name.rfind("adam.v:", 0) == 0) ck.adam.v.push_back(read_values(d));
    else if (d.name == "bn.mean" && ck.bn) ck.bn->running_mean = read_values(d);
    else if (d.name == "bn.var" && ck.bn) ck.bn->running_var = read_values(d);
    else throw std::runtime_error("checkpoint: unexpected tensor " + d.name);
  }
  if (ck.params.size() != layout.size()) throw std::runtime_error("checkpoint: parameter set does not match the model");
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (ck.params.name(i) != layout.name(i) || ck.params.tensor(i).shape != layout.tensor(i).shape)
      throw std::runtime_error("checkpoint: tensor " + ck.params.name(i) + " does not match the model layout");
  if (!ck.adam.m.empty() && (ck.adam.m.size() != layout.size() || ck.adam.v.size() != layout.size()))
    throw std::runtime_error("checkpoint: incomplete optimizer state");
  if (ck.bn && (ck.bn->running_mean.size() != ck.config.model.latent || ck.bn->running_var.size() != ck.config.model.latent))
    throw std::runtime_error("checkpoint: batch-norm statistics missing");
  Rng probe;
  probe.restore(ck.rng_state);
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
  const auto bytes = serialize_checkpoint(ckpt);
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, file);
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

std::string LossRow::csv_header() { return "step,epoch,loss,reconstruction,regularizer,anneal,grad_norm"; }

std::string LossRow::csv_row() const {
  return std::to_string(step) + "," + std::to_string(epoch) + "," + fmt(loss) + "," + fmt(reconstruction) + "," +
         fmt(regularizer) + "," + fmt(anneal) + "," + fmt(grad_norm);
}

std::string EvalRow::csv_header() { return "epoch,step," + metrics::MetricsReport::csv_header(); }

std::string EvalRow::csv_row() const { return std::to_string(epoch) + "," + std::to_string(step) + "," + report.csv_row(); }

NonFiniteLoss::NonFiniteLoss(std::size_t s, Checkpoint last)
    : std::runtime_error("non-finite loss at step " + std::to_string(s)), step(s), last_finite(std::move(last)) {}

Checkpoint initial_checkpoint(const TrainConfig& config) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  Rng init = Rng::derived(config.seed, kInitTag);
  ck.params = model::initialize(config.model, init);
  if (config.model.batch_norm) ck.bn.emplace(config.model.latent);
  ck.rng_state = Rng::derived(config.seed, kTrainTag).state();
  return ck;
}

void check_compatible(const TrainConfig& config, const corpus::Dataset& data) {
  if (config.model.mode == model::Mode::kSequence) {
    if (data.kind != corpus::DataKind::kGrammar) throw std::invalid_argument("train: sequence model needs token data");
    if (data.vocab != config.model.vocab)
      throw std::invalid_argument("train: dataset vocab " + std::to_string(data.vocab) + " does not match model vocab " +
                                  std::to_string(config.model.vocab));
  } else {
    if (data.kind != corpus::DataKind::kMixture) throw std::invalid_argument("train: continuous model needs point data");
    if (data.train.points.cols != config.model.obs_dim)
      throw std::invalid_argument("train: dataset point dimension " + std::to_string(data.train.points.cols) +
                                  " does not match model obs_dim " + std::to_string(config.model.obs_dim));
  }
}

TrainResult train(const TrainConfig& config, const corpus::Dataset& data, const Callbacks& callbacks) {
  return run(initial_checkpoint(config), data, callbacks);
}

TrainResult resume(Checkpoint ckpt, const corpus::Dataset& data, const Callbacks& callbacks) {
  return run(std::move(ckpt), data, callbacks);
}

TrainResult resume(Checkpoint ckpt, std::size_t epochs, const corpus::Dataset& data, const Callbacks& callbacks) {
  ckpt.config.epochs = epochs;
  return run(std::move(ckpt), data, callbacks);
}

metrics::MetricsReport evaluate_split(const Checkpoint& ck, const corpus::Split& split, const metrics::MetricsConfig& mc,
                                      Rng& rng, std::size_t limit) {
  const std::size_t n = limit == 0 ? split.size() : std::min(limit, split.size());
  const obj::BnStats* bn = ck.bn ? &*ck.bn : nullptr;
  if (ck.config.model.mode == model::Mode::kSequence) {
    metrics::EvalSet set{std::span<const TokenSequence>(split.sequences).first(n), nullptr};
    return metrics::evaluate(ck.config.model, ck.params, bn, set, mc, rng);
  }
  Matrix pts(n, split.points.cols);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < pts.cols; ++k) pts(i, k) = split.points(i, k);
  metrics::EvalSet set{{}, &pts};
  return metrics::evaluate(ck.config.model, ck.params, bn, set, mc, rng);
}

}  // namespace dgvae::train
