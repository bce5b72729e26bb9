#pragma once

// Synthetic datasets: a probabilistic token grammar whose template and slot
// choices are latent structure, and a 2-D Gaussian mixture of points.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dgvae/matrix.hpp"
#include "dgvae/rng.hpp"
#include "dgvae/tokens.hpp"

namespace dgvae::corpus {

// Skeleton entries >= 0 are fixed tokens; entry -(k + 1) is slot k.
struct Template {
  double weight = 1.0;
  std::vector<std::int64_t> skeleton;
  std::vector<std::vector<Token>> slot_tokens;
  std::vector<std::vector<double>> slot_weights;  // empty means uniform

  std::size_t slot_count() const { return slot_tokens.size(); }
};

struct GrammarSpec {
  std::size_t vocab = 30;
  std::vector<Template> templates;

  // Throws std::invalid_argument naming the offending template or slot.
  void validate() const;
};

// 8 templates x 3 slots x 4 candidates over V = 30, content lengths 6..12.
GrammarSpec default_grammar();

struct MixtureSpec {
  Matrix means;  // [K, 2]
  double sigma = 0.3;
  std::vector<double> weights;

  void validate() const;
};

// Four equally weighted components at (+-2, +-2), sigma 0.3.
MixtureSpec default_mixture();

struct SplitCounts {
  std::size_t train = 5000;
  std::size_t valid = 500;
  std::size_t test = 500;
};

struct Split {
  std::vector<TokenSequence> sequences;  // grammar data
  Matrix points;                         // mixture data, [n, 2]
  std::vector<std::size_t> labels;       // template or component ids, diagnostics only

  std::size_t size() const { return labels.size(); }
};

enum class DataKind { kGrammar, kMixture };

struct Dataset {
  DataKind kind = DataKind::kGrammar;
  std::size_t vocab = 0;  // grammar only
  Split train, valid, test;
};

struct DataSpec {
  DataKind kind = DataKind::kGrammar;
  GrammarSpec grammar = default_grammar();
  MixtureSpec mixture = default_mixture();
  SplitCounts counts;
};

std::size_t sample_categorical(const std::vector<double>& weights, Rng& rng);

Split generate_grammar_corpus(const GrammarSpec& spec, std::size_t n, Rng& rng);
Split generate_mixture_data(const MixtureSpec& spec, std::size_t n, Rng& rng);
// Splits drawn in order train, valid, test from one stream seeded by `seed`.
Dataset generate(const DataSpec& spec, std::uint64_t seed);

// Template id whose skeleton matches exactly; nullopt when none or several match.
std::optional<std::size_t> parse_template(const GrammarSpec& spec, const TokenSequence& sequence);

// Index batches for one epoch: consecutive runs of `batch_size` over a
// Fisher-Yates permutation (identity order when shuffle is off); the final
// batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, bool shuffle, Rng& rng);

// JSON data spec; errors carry "line L, column C" for syntax problems and
// the field path (e.g. grammar.templates[2].skeleton[1]) for content problems.
DataSpec parse_data_spec(const std::string& text);
std::string data_spec_to_json(const DataSpec& spec);

// train.txt / valid.txt / test.txt (one sequence or point per line) plus meta.json.
void write_dataset(const Dataset& data, const std::filesystem::path& dir, std::uint64_t seed, const DataSpec& spec);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace dgvae::corpus
