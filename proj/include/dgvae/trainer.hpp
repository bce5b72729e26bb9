#pragma once

// Mini-batch training: Adam with global-norm clipping over encoder and
// decoder jointly, periodic validation metrics, binary checkpoints and exact
// resume.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgvae/corpus.hpp"
#include "dgvae/metrics.hpp"
#include "dgvae/models.hpp"
#include "dgvae/objectives.hpp"

namespace dgvae::train {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  AdamConfig adam;
  double clip_norm = 5.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  std::size_t eval_interval = 1;  // epochs; 0 evaluates after the last epoch only
  std::size_t eval_limit = 0;     // leading validation rows scored; 0 = all
  // Encoder/decoder architecture. family, kappa, batch_norm and bn_gamma are
  // derived from the objective by harmonize().
  model::ModelConfig model;
  obj::ObjectiveConfig objective;
  metrics::MetricsConfig metrics{.s_prior = 32, .s_post = 32};

  void harmonize();
  void validate() const;
};

// Throws std::invalid_argument with a line/column or field diagnostic.
// Missing keys keep their defaults; the result is harmonized and validated.
TrainConfig parse_train_config(const std::string& text);
std::string train_config_to_json(const TrainConfig& config);

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One gradient vector per parameter tensor, in ParameterSet order.
using Gradients = std::vector<std::vector<double>>;

double global_norm(const Gradients& g);
// Rescales to at most max_norm; returns the norm before clipping.
double clip_gradients(Gradients& g, double max_norm);
void adam_update(model::ParameterSet& params, AdamState& state, const Gradients& g, const AdamConfig& config);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  TrainConfig config;
  model::ParameterSet params;
  AdamState adam;
  std::optional<obj::BnStats> bn;
  std::string rng_state;       // sampling stream
  std::size_t step = 0;        // optimizer steps taken
  std::size_t epoch = 0;       // epoch in progress (0-based)
  std::size_t batch = 0;       // next batch within that epoch
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
Checkpoint load_checkpoint(const std::filesystem::path& file);

struct LossRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double reconstruction = 0.0;
  double regularizer = 0.0;
  double anneal = 1.0;
  double grad_norm = 0.0;  // before clipping

  static std::string csv_header();
  std::string csv_row() const;
};

struct EvalRow {
  std::size_t epoch = 0;  // epochs completed
  std::size_t step = 0;
  metrics::MetricsReport report;

  static std::string csv_header();
  std::string csv_row() const;
};

struct Callbacks {
  std::function<void(const LossRow&)> on_step;
  std::function<void(const EvalRow&)> on_eval;
  std::function<void(const Checkpoint&)> on_epoch_end;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRow> losses;
  std::vector<EvalRow> evals;
};

// Thrown on a non-finite loss. `last_finite` holds the state before the
// offending step.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::size_t step, Checkpoint last_finite);
  std::size_t step;
  Checkpoint last_finite;
};

// Fresh state: parameters, stream and counters from config.seed.
Checkpoint initial_checkpoint(const TrainConfig& config);

// Runs until config.epochs epochs are complete. Throws std::invalid_argument
// when the dataset does not fit the model.
TrainResult train(const TrainConfig& config, const corpus::Dataset& data, const Callbacks& callbacks = {});
TrainResult resume(Checkpoint ckpt, const corpus::Dataset& data, const Callbacks& callbacks = {});
// Continue with a different epoch budget.
TrainResult resume(Checkpoint ckpt, std::size_t epochs, const corpus::Dataset& data, const Callbacks& callbacks = {});

void check_compatible(const TrainConfig& config, const corpus::Dataset& data);

// Metrics on a split with the checkpoint's frozen parameters.
metrics::MetricsReport evaluate_split(const Checkpoint& ckpt, const corpus::Split& split, const metrics::MetricsConfig& mc,
                                      Rng& rng, std::size_t limit = 0);

}  // namespace dgvae::train
