#include "dgvae/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json_util.hpp"

namespace dgvae::corpus {

namespace {

using json = jsonutil::json;

bool weights_ok(const std::vector<double>& w) {
  if (w.empty()) return false;
  double s = 0.0;
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) return false;
    s += x;
  }
  return std::abs(s - 1.0) <= 1e-9;
}

std::vector<double> template_weights(const GrammarSpec& spec) {
  std::vector<double> w;
  for (const auto& t : spec.templates) w.push_back(t.weight);
  return w;
}

}  // namespace

void GrammarSpec::validate() const {
  if (vocab < 3) throw std::invalid_argument("grammar: vocab must be at least 3");
  if (templates.empty()) throw std::invalid_argument("grammar: no templates");
  if (!weights_ok(template_weights(*this)))
    throw std::invalid_argument("grammar: template weights must be non-negative and sum to 1");
  for (std::size_t k = 0; k < templates.size(); ++k) {
    const auto& t = templates[k];
    const std::string where = "grammar: template " + std::to_string(k);
    if (t.skeleton.empty()) throw std::invalid_argument(where + " has an empty skeleton");
    std::vector<int> used(t.slot_count(), 0);
    for (auto e : t.skeleton) {
      if (e >= 0) {
        if (static_cast<std::size_t>(e) >= vocab || e == kBos || e == kEos)
          throw std::invalid_argument(where + ": fixed token " + std::to_string(e) + " is a marker or outside vocab");
      } else {
        const auto slot = static_cast<std::size_t>(-e - 1);
        if (slot >= t.slot_count()) throw std::invalid_argument(where + ": skeleton refers to missing slot " +
                                                                std::to_string(slot));
        ++used[slot];
      }
    }
    if (!t.slot_weights.empty() && t.slot_weights.size() != t.slot_count())
      throw std::invalid_argument(where + ": slot_weights must list one distribution per slot");
    for (std::size_t s = 0; s < t.slot_count(); ++s) {
      if (used[s] != 1) throw std::invalid_argument(where + ": slot " + std::to_string(s) + " must appear exactly once");
      if (t.slot_tokens[s].empty()) throw std::invalid_argument(where + ": slot " + std::to_string(s) + " is empty");
      for (Token tok : t.slot_tokens[s])
        if (tok >= vocab || tok == kBos || tok == kEos)
          throw std::invalid_argument(where + ": slot " + std::to_string(s) + " token " + std::to_string(tok) +
                                      " is a marker or outside vocab");
      if (!t.slot_weights.empty() &&
          (t.slot_weights[s].size() != t.slot_tokens[s].size() || !weights_ok(t.slot_weights[s])))
        throw std::invalid_argument(where + ": slot " + std::to_string(s) + " weights must match tokens and sum to 1");
    }
  }
}

GrammarSpec default_grammar() {
  GrammarSpec g;
  g.vocab = 30;
  const std::size_t lengths[8] = {6, 7, 8, 9, 10, 11, 12, 8};
  for (std::size_t k = 0; k < 8; ++k) {
    Template t;
    t.weight = 0.125;
    for (std::size_t s = 0; s < 3; ++s) {
      std::vector<Token> cands;
      for (Token c = 0; c < 4; ++c) cands.push_back(static_cast<Token>(18 + 4 * s + c));
      t.slot_tokens.push_back(cands);
    }
    const std::size_t L = lengths[k];
    const std::size_t slot_pos[3] = {1, L / 2, L - 1};
    std::size_t filler = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (i == 0) {
        t.skeleton.push_back(static_cast<std::int64_t>(2 + k));
      } else if (i == slot_pos[0] || i == slot_pos[1] || i == slot_pos[2]) {
        const auto s = static_cast<std::int64_t>(i == slot_pos[0] ? 0 : i == slot_pos[1] ? 1 : 2);
        t.skeleton.push_back(-(s + 1));
      } else {
        t.skeleton.push_back(static_cast<std::int64_t>(10 + (k + filler++) % 8));
      }
    }
    g.templates.push_back(std::move(t));
  }
  return g;
}

void MixtureSpec::validate() const {
  if (means.rows == 0 || means.cols != 2) throw std::invalid_argument("mixture: means must be a non-empty [K, 2] list");
  if (weights.size() != means.rows) throw std::invalid_argument("mixture: one weight per component required");
  if (!weights_ok(weights)) throw std::invalid_argument("mixture: weights must be non-negative and sum to 1");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("mixture: sigma must be positive");
}

MixtureSpec default_mixture() {
  MixtureSpec m;
  m.means = Matrix(4, 2, {2.0, 2.0, 2.0, -2.0, -2.0, 2.0, -2.0, -2.0});
  m.sigma = 0.3;
  m.weights = {0.25, 0.25, 0.25, 0.25};
  return m;
}

std::size_t sample_categorical(const std::vector<double>& weights, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    acc += weights[k];
    if (u < acc) return k;
  }
  for (std::size_t k = weights.size(); k-- > 0;)
    if (weights[k] > 0.0) return k;
  return 0;
}

Split generate_grammar_corpus(const GrammarSpec& spec, std::size_t n, Rng& rng) {
  spec.validate();
  const auto weights = template_weights(spec);
  Split out;
  out.sequences.reserve(n);
  out.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = sample_categorical(weights, rng);
    const auto& t = spec.templates[k];
    std::vector<Token> fill(t.slot_count());
    for (std::size_t s = 0; s < t.slot_count(); ++s) {
      const auto& cands = t.slot_tokens[s];
      fill[s] = t.slot_weights.empty() ? cands[rng.index(cands.size())]
                                       : cands[sample_categorical(t.slot_weights[s], rng)];
    }
    TokenSequence seq{kBos};
    for (auto e : t.skeleton) seq.push_back(e >= 0 ? static_cast<Token>(e) : fill[static_cast<std::size_t>(-e - 1)]);
    seq.push_back(kEos);
    out.sequences.push_back(std::move(seq));
    out.labels.push_back(k);
  }
  return out;
}

Split generate_mixture_data(const MixtureSpec& spec, std::size_t n, Rng& rng) {
  spec.validate();
  Split out;
  out.points = Matrix(n, 2);
  out.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = sample_categorical(spec.weights, rng);
    out.points(i, 0) = spec.means(k, 0) + spec.sigma * rng.normal();
    out.points(i, 1) = spec.means(k, 1) + spec.sigma * rng.normal();
    out.labels.push_back(k);
  }
  return out;
}

Dataset generate(const DataSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.kind = spec.kind;
  auto draw = [&](std::size_t n) {
    return spec.kind == DataKind::kGrammar ? generate_grammar_corpus(spec.grammar, n, rng)
                                           : generate_mixture_data(spec.mixture, n, rng);
  };
  d.vocab = spec.kind == DataKind::kGrammar ? spec.grammar.vocab : 0;
  d.train = draw(spec.counts.train);
  d.valid = draw(spec.counts.valid);
  d.test = draw(spec.counts.test);
  return d;
}

std::optional<std::size_t> parse_template(const GrammarSpec& spec, const TokenSequence& sequence) {
  std::optional<std::size_t> found;
  if (sequence.size() < 2 || sequence.front() != kBos || sequence.back() != kEos) return std::nullopt;
  for (std::size_t k = 0; k < spec.templates.size(); ++k) {
    const auto& t = spec.templates[k];
    if (sequence.size() != t.skeleton.size() + 2) continue;
    bool ok = true;
    for (std::size_t i = 0; i < t.skeleton.size() && ok; ++i) {
      const Token tok = sequence[i + 1];
      const auto e = t.skeleton[i];
      if (e >= 0) {
        ok = tok == static_cast<Token>(e);
      } else {
        const auto& c = t.slot_tokens[static_cast<std::size_t>(-e - 1)];
        ok = std::find(c.begin(), c.end(), tok) != c.end();
      }
    }
    if (!ok) continue;
    if (found) return std::nullopt;
    found = k;
  }
  return found;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, bool shuffle, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("epoch_batches: batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle)
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t lo = 0; lo < n; lo += batch_size)
    out.emplace_back(order.begin() + lo, order.begin() + std::min(n, lo + batch_size));
  return out;
}

namespace {

using namespace jsonutil;

GrammarSpec parse_grammar(const json& g, const std::string& path) {
  GrammarSpec spec;
  if (g.contains("vocab")) spec.vocab = count(g["vocab"], path + ".vocab");
  const auto& ts = array(require(g, "templates", path), path + ".templates");
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const std::string tp = at(path + ".templates", k);
    Template t;
    t.weight = number(require(ts[k], "weight", tp), tp + ".weight");
    const auto& sk = array(require(ts[k], "skeleton", tp), tp + ".skeleton");
    for (std::size_t i = 0; i < sk.size(); ++i) {
      const std::string ep = at(tp + ".skeleton", i);
      if (sk[i].is_number_integer()) {
        if (sk[i].get<std::int64_t>() < 0) field_error(ep, "fixed tokens must be non-negative");
        t.skeleton.push_back(sk[i].get<std::int64_t>());
      } else if (sk[i].is_string() && sk[i].get<std::string>().rfind("slot", 0) == 0) {
        try {
          t.skeleton.push_back(-static_cast<std::int64_t>(std::stoul(sk[i].get<std::string>().substr(4))) - 1);
        } catch (const std::exception&) {
          field_error(ep, "slot references look like \"slot0\"");
        }
      } else {
        field_error(ep, "expected a token id or a \"slotK\" reference");
      }
    }
    const auto& slots = array(require(ts[k], "slots", tp), tp + ".slots");
    for (std::size_t s = 0; s < slots.size(); ++s) {
      std::vector<Token> cands;
      const std::string sp = at(tp + ".slots", s);
      for (std::size_t i = 0; i < array(slots[s], sp).size(); ++i)
        cands.push_back(static_cast<Token>(count(slots[s][i], at(sp, i))));
      t.slot_tokens.push_back(cands);
    }
    if (ts[k].contains("slot_weights")) {
      const auto& sw = array(ts[k]["slot_weights"], tp + ".slot_weights");
      for (std::size_t s = 0; s < sw.size(); ++s) t.slot_weights.push_back(number_list(sw[s], at(tp + ".slot_weights", s)));
    }
    spec.templates.push_back(std::move(t));
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    field_error(path, e.what());
  }
  return spec;
}

MixtureSpec parse_mixture(const json& m, const std::string& path) {
  MixtureSpec spec;
  const auto& means = array(require(m, "means", path), path + ".means");
  spec.means = Matrix(means.size(), 2);
  for (std::size_t k = 0; k < means.size(); ++k) {
    auto row = number_list(means[k], at(path + ".means", k));
    if (row.size() != 2) field_error(at(path + ".means", k), "expected two coordinates");
    spec.means(k, 0) = row[0];
    spec.means(k, 1) = row[1];
  }
  spec.sigma = number(require(m, "sigma", path), path + ".sigma");
  spec.weights = number_list(require(m, "weights", path), path + ".weights");
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    field_error(path, e.what());
  }
  return spec;
}

json grammar_json(const GrammarSpec& g) {
  json ts = json::array();
  for (const auto& t : g.templates) {
    json sk = json::array();
    for (auto e : t.skeleton) {
      if (e >= 0) sk.push_back(e);
      else sk.push_back("slot" + std::to_string(-e - 1));
    }
    json jt = {{"weight", t.weight}, {"skeleton", sk}, {"slots", t.slot_tokens}};
    if (!t.slot_weights.empty()) jt["slot_weights"] = t.slot_weights;
    ts.push_back(jt);
  }
  return {{"vocab", g.vocab}, {"templates", ts}};
}

json mixture_json(const MixtureSpec& m) {
  json means = json::array();
  for (std::size_t k = 0; k < m.means.rows; ++k) means.push_back({m.means(k, 0), m.means(k, 1)});
  return {{"means", means}, {"sigma", m.sigma}, {"weights", m.weights}};
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_split(const Split& s, DataKind kind, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  if (kind == DataKind::kGrammar) {
    for (const auto& seq : s.sequences) {
      for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
      out << '\n';
    }
  } else {
    for (std::size_t i = 0; i < s.points.rows; ++i)
      out << format_double(s.points(i, 0)) << ' ' << format_double(s.points(i, 1)) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

Split read_split(DataKind kind, const std::filesystem::path& file, std::size_t vocab) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  Split s;
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> pts;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (kind == DataKind::kGrammar) {
      TokenSequence seq;
      long long v;
      while (ls >> v) {
        if (v < 0 || static_cast<std::size_t>(v) >= vocab)
          throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": token " + std::to_string(v) +
                                   " outside vocab");
        seq.push_back(static_cast<Token>(v));
      }
      if (!ls.eof() || seq.size() < 2)
        throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": malformed sequence");
      s.sequences.push_back(std::move(seq));
    } else {
      double x, y;
      if (!(ls >> x >> y)) throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": malformed point");
      pts.push_back(x);
      pts.push_back(y);
    }
  }
  if (kind == DataKind::kMixture) s.points = Matrix(pts.size() / 2, 2, pts);
  return s;
}

}  // namespace

DataSpec parse_data_spec(const std::string& text) {
  const json j = parse_located(text);
  if (!j.is_object()) field_error("(root)", "expected an object");
  DataSpec spec;
  const std::string kind = j.value("kind", std::string("grammar"));
  if (kind == "grammar") {
    spec.kind = DataKind::kGrammar;
    if (j.contains("grammar")) spec.grammar = parse_grammar(j["grammar"], "grammar");
  } else if (kind == "mixture") {
    spec.kind = DataKind::kMixture;
    if (j.contains("mixture")) spec.mixture = parse_mixture(j["mixture"], "mixture");
  } else {
    field_error("kind", "expected \"grammar\" or \"mixture\", got \"" + kind + "\"");
  }
  if (j.contains("counts")) {
    const auto& c = j["counts"];
    if (c.contains("train")) spec.counts.train = count(c["train"], "counts.train");
    if (c.contains("valid")) spec.counts.valid = count(c["valid"], "counts.valid");
    if (c.contains("test")) spec.counts.test = count(c["test"], "counts.test");
  }
  return spec;
}

std::string data_spec_to_json(const DataSpec& spec) {
  json j;
  j["kind"] = spec.kind == DataKind::kGrammar ? "grammar" : "mixture";
  if (spec.kind == DataKind::kGrammar) j["grammar"] = grammar_json(spec.grammar);
  else j["mixture"] = mixture_json(spec.mixture);
  j["counts"] = {{"train", spec.counts.train}, {"valid", spec.counts.valid}, {"test", spec.counts.test}};
  return j.dump(2);
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir, std::uint64_t seed, const DataSpec& spec) {
  std::filesystem::create_directories(dir);
  write_split(data.train, data.kind, dir / "train.txt");
  write_split(data.valid, data.kind, dir / "valid.txt");
  write_split(data.test, data.kind, dir / "test.txt");
  json meta;
  meta["kind"] = data.kind == DataKind::kGrammar ? "grammar" : "mixture";
  meta["vocab"] = data.vocab;
  meta["seed"] = seed;
  meta["counts"] = {{"train", data.train.size()}, {"valid", data.valid.size()}, {"test", data.test.size()}};
  meta["labels"] = {{"train", data.train.labels}, {"valid", data.valid.labels}, {"test", data.test.labels}};
  meta["spec"] = json::parse(data_spec_to_json(spec));
  std::ofstream out(dir / "meta.json");
  out << meta.dump(1) << '\n';
  if (!out) throw std::runtime_error("failed writing " + (dir / "meta.json").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "meta.json").string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error((dir / "meta.json").string() + ": " + e.what());
  }
  Dataset d;
  d.kind = meta.at("kind").get<std::string>() == "mixture" ? DataKind::kMixture : DataKind::kGrammar;
  d.vocab = meta.at("vocab").get<std::size_t>();
  auto load = [&](const char* name) {
    Split s = read_split(d.kind, dir / (std::string(name) + ".txt"), d.vocab);
    s.labels = meta.at("labels").at(name).get<std::vector<std::size_t>>();
    const std::size_t n = d.kind == DataKind::kGrammar ? s.sequences.size() : s.points.rows;
    if (s.labels.size() != n || meta.at("counts").at(name).get<std::size_t>() != n)
      throw std::runtime_error(std::string(name) + ".txt: row count does not match meta.json");
    return s;
  };
  d.train = load("train");
  d.valid = load("valid");
  d.test = load("test");
  return d;
}

}  // namespace dgvae::corpus
