#pragma once

// Encoder/decoder pair for token sequences (single-layer GRUs) and for
// continuous points (one-hidden-layer MLPs), with Gaussian or vMF posterior
// heads and greedy decoding.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dgvae/autodiff.hpp"
#include "dgvae/densitygap.hpp"
#include "dgvae/matrix.hpp"
#include "dgvae/objectives.hpp"
#include "dgvae/rng.hpp"
#include "dgvae/tokens.hpp"

namespace dgvae::model {

enum class Mode { kSequence, kContinuous };

struct ModelConfig {
  Mode mode = Mode::kSequence;
  dist::Family family = dist::Family::kGaussian;
  std::size_t vocab = 30;
  std::size_t embed = 16;
  std::size_t hidden = 64;
  std::size_t latent = 8;
  std::size_t obs_dim = 2;    // continuous mode
  std::size_t max_len = 16;   // greedy decoding budget, markers included
  double kappa = 13.0;        // vMF concentration
  double sigma_obs = 0.1;     // continuous observation noise
  double init_scale = 0.08;
  bool feed_latent = false;   // also concatenate z to every decoder input
  bool batch_norm = false;
  double bn_gamma = 1.0;

  void validate() const;
  dist::PriorSpec prior() const;
};

struct Tensor {
  ad::Shape shape;
  std::vector<double> values;
};

// Named tensors in a fixed insertion order.
class ParameterSet {
 public:
  void add(std::string name, ad::Shape shape, std::vector<double> values);
  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  std::size_t index_of(std::string_view name) const;

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  std::size_t total_values() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// Every value drawn uniformly from [-init_scale, init_scale].
ParameterSet initialize(const ModelConfig& config, Rng& rng);

// Parameters placed on one tape, in ParameterSet order.
struct Bound {
  const ParameterSet* params = nullptr;
  std::vector<ad::Var> vars;

  ad::Var operator[](std::string_view name) const { return vars.at(params->index_of(name)); }
};

Bound bind(ad::Tape& tape, const ParameterSet& params, bool trainable);

// Padded, time-major token batch: entry t * size + n is token t of sequence n.
struct SequenceBatch {
  std::size_t size = 0;
  std::size_t steps = 0;
  std::vector<Token> tokens;
  std::vector<std::size_t> lengths;

  Token at(std::size_t t, std::size_t n) const { return tokens[t * size + n]; }
  bool active(std::size_t t, std::size_t n) const { return t < lengths[n]; }
};

// Throws std::invalid_argument on an out-of-vocab token or a sequence shorter
// than two tokens.
SequenceBatch make_batch(std::span<const TokenSequence> sequences, std::size_t vocab);
// Each sequence repeated `count` times in place (row n * count + m).
SequenceBatch repeat(const SequenceBatch& batch, std::size_t count);

// h' = n + u * (h - n), with r, u = sigmoid(gx + h Wh) on their blocks and
// n = tanh(gx_n + r * (h Wh)_n). gx already holds x Wx + b, shape [B, 3H].
ad::Var gru_step(ad::Var gx, ad::Var h, ad::Var wh);

// Row-wise log-softmax of [N, V] logits.
ad::Var log_softmax(ad::Var logits);

struct EncodeOptions {
  bool train = false;              // BN batch statistics vs running statistics
  obj::BnStats* bn_stats = nullptr;
};

dg::PosteriorBatch encode(const ModelConfig& config, const Bound& p, const SequenceBatch& batch,
                          EncodeOptions options = {});
dg::PosteriorBatch encode(const ModelConfig& config, const Bound& p, const Matrix& points,
                          EncodeOptions options = {});

// [rows of z] teacher-forced log p(x | z); z row r decodes target row r.
ad::Var decode_log_likelihood(const ModelConfig& config, const Bound& p, ad::Var z, const SequenceBatch& targets);
ad::Var decode_log_likelihood(const ModelConfig& config, const Bound& p, ad::Var z, const Matrix& targets);

// Argmax decoding from each row of z, lowest token id on ties. Output starts
// with the begin marker and stops after the end marker or at max_len tokens.
std::vector<TokenSequence> greedy_decode(const ModelConfig& config, const ParameterSet& params, const Matrix& z,
                                         std::size_t max_len);
// Decoder mean for each row of z (continuous mode).
Matrix decode_mean(const ModelConfig& config, const ParameterSet& params, const Matrix& z);

// Posterior parameters without gradients, evaluated in chunks.
struct PosteriorDump {
  dist::Family family = dist::Family::kGaussian;
  Matrix mu;
  Matrix log_sigma;  // Gaussian only
  double kappa = 0.0;
};
PosteriorDump encode_all(const ModelConfig& config, const ParameterSet& params, const obj::BnStats* bn_stats,
                         std::span<const TokenSequence> data, std::size_t chunk = 256);
PosteriorDump encode_all(const ModelConfig& config, const ParameterSet& params, const obj::BnStats* bn_stats,
                         const Matrix& points, std::size_t chunk = 256);

// Log-likelihoods log p(x_row | z_r) for z rows, datapoint of row r given by
// `owner[r]`, evaluated without gradients in chunks.
std::vector<double> log_likelihoods(const ModelConfig& config, const ParameterSet& params, const Matrix& z,
                                    std::span<const TokenSequence> data, std::span<const std::size_t> owner,
                                    std::size_t chunk = 2048);
std::vector<double> log_likelihoods(const ModelConfig& config, const ParameterSet& params, const Matrix& z,
                                    const Matrix& points, std::span<const std::size_t> owner,
                                    std::size_t chunk = 2048);

// Drops the begin marker and everything from the first end marker on.
TokenSequence strip_markers(std::span<const Token> sequence);

}  // namespace dgvae::model
