#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dgvae/corpus.hpp"

namespace corpus = dgvae::corpus;
using dgvae::kBos;
using dgvae::kEos;
using dgvae::Rng;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dgvae_corpus_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Corpus, DefaultGrammarIsValid) {
  const auto g = corpus::default_grammar();
  EXPECT_NO_THROW(g.validate());
  EXPECT_EQ(g.templates.size(), 8u);
  std::set<std::size_t> lengths;
  for (const auto& t : g.templates) {
    EXPECT_EQ(t.slot_count(), 3u);
    for (const auto& s : t.slot_tokens) EXPECT_EQ(s.size(), 4u);
    lengths.insert(t.skeleton.size());
  }
  EXPECT_EQ(*lengths.begin(), 6u);
  EXPECT_EQ(*lengths.rbegin(), 12u);
}

TEST(Corpus, SingleFixedTemplateGivesIdenticalSequences) {
  corpus::GrammarSpec g;
  g.vocab = 5;
  g.templates.push_back({1.0, {2, 3, 4}, {}, {}});
  Rng rng(1);
  auto s = corpus::generate_grammar_corpus(g, 50, rng);
  for (const auto& seq : s.sequences) EXPECT_EQ(seq, (dgvae::TokenSequence{kBos, 2, 3, 4, kEos}));
}

TEST(Corpus, TemplateFrequenciesMatchPrior) {
  auto g = corpus::default_grammar();
  const double w[8] = {0.05, 0.1, 0.15, 0.2, 0.1, 0.1, 0.2, 0.1};
  for (std::size_t k = 0; k < 8; ++k) g.templates[k].weight = w[k];
  Rng rng(7);
  const std::size_t n = 5000;
  auto s = corpus::generate_grammar_corpus(g, n, rng);
  std::vector<double> freq(8, 0.0);
  for (auto l : s.labels) freq[l] += 1.0 / n;
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(freq[k], w[k], 3.0 * std::sqrt(w[k] * (1.0 - w[k]) / n));
}

TEST(Corpus, EverySequenceParsesBackToItsTemplate) {
  const auto g = corpus::default_grammar();
  Rng rng(3);
  auto s = corpus::generate_grammar_corpus(g, 5000, rng);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto k = corpus::parse_template(g, s.sequences[i]);
    ASSERT_TRUE(k.has_value());
    EXPECT_EQ(*k, s.labels[i]);
    EXPECT_GE(s.sequences[i].size(), 8u);
    EXPECT_LE(s.sequences[i].size(), 14u);
  }
  EXPECT_FALSE(corpus::parse_template(g, {kBos, 2, kEos}).has_value());
}

TEST(Corpus, VocabularyCoverage) {
  const auto g = corpus::default_grammar();
  Rng rng(5);
  auto s = corpus::generate_grammar_corpus(g, 5000, rng);
  std::set<dgvae::Token> seen;
  for (const auto& seq : s.sequences) seen.insert(seq.begin(), seq.end());
  EXPECT_EQ(seen.size(), g.vocab);
}

TEST(Corpus, GenerationIsPureInSeed) {
  corpus::DataSpec spec;
  spec.counts = {200, 20, 20};
  auto a = corpus::generate(spec, 42), b = corpus::generate(spec, 42), c = corpus::generate(spec, 43);
  EXPECT_EQ(a.train.sequences, b.train.sequences);
  EXPECT_EQ(a.test.labels, b.test.labels);
  EXPECT_NE(a.train.sequences, c.train.sequences);
}

TEST(Corpus, MixtureSingleComponentMean) {
  corpus::MixtureSpec m;
  m.means = dgvae::Matrix(1, 2, {0.0, 0.0});
  m.sigma = 1.0;
  m.weights = {1.0};
  Rng rng(9);
  const std::size_t n = 4000;
  auto s = corpus::generate_mixture_data(m, n, rng);
  for (std::size_t d = 0; d < 2; ++d) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += s.points(i, d) / n;
    EXPECT_LT(std::abs(mean), 3.0 / std::sqrt(static_cast<double>(n)));
  }
}

TEST(Corpus, MixtureComponentCountsAndLabels) {
  const auto m = corpus::default_mixture();
  Rng rng(10);
  const std::size_t n = 4000;
  auto s = corpus::generate_mixture_data(m, n, rng);
  std::vector<double> counts(4, 0.0);
  std::size_t near = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = s.labels[i];
    counts[k] += 1.0;
    const double dx = s.points(i, 0) - m.means(k, 0), dy = s.points(i, 1) - m.means(k, 1);
    if (std::sqrt(dx * dx + dy * dy) <= 6.0 * m.sigma) ++near;
  }
  for (double c : counts) EXPECT_NEAR(c / n, 0.25, 3.0 * std::sqrt(0.25 * 0.75 / n));
  EXPECT_GT(static_cast<double>(near) / n, 0.99);
}

TEST(Corpus, BatchIteration) {
  Rng rng(1);
  auto b = corpus::epoch_batches(100, 32, false, rng);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].size(), 32u);
  EXPECT_EQ(b[3].size(), 4u);
  EXPECT_EQ(b, corpus::epoch_batches(100, 32, false, rng));
  Rng r1(5), r2(5);
  auto s1 = corpus::epoch_batches(100, 32, true, r1);
  auto s2 = corpus::epoch_batches(100, 32, true, r2);
  EXPECT_EQ(s1, s2);
  EXPECT_NE(s1, b);
  std::set<std::size_t> all;
  for (const auto& batch : s1) all.insert(batch.begin(), batch.end());
  EXPECT_EQ(all.size(), 100u);
  EXPECT_NE(corpus::epoch_batches(100, 32, true, r1), s1);
}

TEST(Corpus, SpecRoundTripAndDiagnostics) {
  corpus::DataSpec spec;
  auto text = corpus::data_spec_to_json(spec);
  auto back = corpus::parse_data_spec(text);
  EXPECT_EQ(corpus::data_spec_to_json(back), text);
  EXPECT_EQ(back.grammar.templates[3].skeleton, spec.grammar.templates[3].skeleton);

  try {
    corpus::parse_data_spec("{\n  \"kind\": \"grammar\",\n  \"counts\": {\"train\": 5,}\n}");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  try {
    corpus::parse_data_spec(R"({"grammar": {"templates": [{"weight": 1, "skeleton": [2, "x"], "slots": []}]}})");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("grammar.templates[0].skeleton[1]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(corpus::parse_data_spec(R"({"kind": "text"})"), std::invalid_argument);
  EXPECT_THROW(corpus::parse_data_spec(R"({"grammar": {"templates": [{"weight": 0.5, "skeleton": [2], "slots": []}]}})"),
               std::invalid_argument);
}

TEST(Corpus, FilesRoundTrip) {
  for (auto kind : {corpus::DataKind::kGrammar, corpus::DataKind::kMixture}) {
    corpus::DataSpec spec;
    spec.kind = kind;
    spec.counts = {60, 10, 10};
    auto d = corpus::generate(spec, 4);
    auto dir = temp_dir(kind == corpus::DataKind::kGrammar ? "grammar" : "mixture");
    corpus::write_dataset(d, dir, 4, spec);
    auto back = corpus::read_dataset(dir);
    EXPECT_EQ(back.train.sequences, d.train.sequences);
    EXPECT_EQ(back.valid.labels, d.valid.labels);
    EXPECT_EQ(back.test.points.data, d.test.points.data);
    std::ifstream f(dir / "train.txt");
    std::size_t lines = 0;
    for (std::string l; std::getline(f, l);) ++lines;
    EXPECT_EQ(lines, 60u);
    std::filesystem::remove_all(dir);
  }
}
