#include "dgvae/cli.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json_util.hpp"

namespace dgvae::cli {

namespace {

using json = jsonutil::json;

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw UsageError("cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

train::TrainConfig parse_config_file(const fs::path& file) {
  try {
    return train::parse_train_config(read_text(file));
  } catch (const std::invalid_argument& e) {
    throw UsageError(file.string() + ": " + e.what());
  }
}

corpus::Dataset load_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("data directory " + dir.string() + " does not exist");
  return corpus::read_dataset(dir);
}

const corpus::Split& pick_split(const corpus::Dataset& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "valid") return d.valid;
  if (name == "test") return d.test;
  throw UsageError("unknown split '" + name + "' (expected train, valid or test)");
}

std::string tokens_text(const TokenSequence& s) {
  std::string out;
  for (auto t : model::strip_markers(s)) out += (out.empty() ? "" : " ") + std::to_string(t);
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Keeps the header plus rows whose `step` column (index col) is at most limit.
void truncate_ledger(const fs::path& file, const std::string& header, std::size_t col, std::size_t limit) {
  std::string kept = header + "\n";
  std::ifstream in(file);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t i = 0; i <= col; ++i) std::getline(ss, cell, ',');
    if (!cell.empty() && std::stoull(cell) <= limit) kept += line + "\n";
  }
  in.close();
  write_text(file, kept);
}

metrics::Histogram split_histogram(const train::Checkpoint& ck, const corpus::Split& split, Rng& rng) {
  const auto& cfg = ck.config.model;
  const obj::BnStats* bn = ck.bn ? &*ck.bn : nullptr;
  auto dump = cfg.mode == model::Mode::kSequence ? model::encode_all(cfg, ck.params, bn, split.sequences)
                                                 : model::encode_all(cfg, ck.params, bn, split.points);
  const double range = cfg.family == dist::Family::kVmf ? 1.2 : 4.0;
  return metrics::posterior_histograms(dump, std::nullopt, 100, -range, range, rng);
}

}  // namespace

std::string RunManifest::to_json() const {
  json j = {{"run_id", run_id},
            {"seed", seed},
            {"config", json::parse(config)},
            {"artifacts", artifacts},
            {"wall_clock_seconds", wall_clock_seconds}};
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  auto j = jsonutil::parse_located(text);
  RunManifest m;
  try {
    m.run_id = j.at("run_id").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config").dump();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("manifest: ") + e.what());
  }
  return m;
}

void cmd_gen_data(const std::optional<fs::path>& spec_file, const fs::path& out_dir, std::uint64_t seed) {
  corpus::DataSpec spec;
  if (spec_file) {
    try {
      spec = corpus::parse_data_spec(read_text(*spec_file));
    } catch (const std::invalid_argument& e) {
      throw UsageError(spec_file->string() + ": " + e.what());
    }
  }
  const auto data = corpus::generate(spec, seed);
  fs::create_directories(out_dir);
  corpus::write_dataset(data, out_dir, seed, spec);
  spdlog::info("wrote {}/{}/{} sequences to {}", data.train.size(), data.valid.size(), data.test.size(), out_dir.string());
}

RunManifest cmd_train(const std::optional<fs::path>& config_file, const fs::path& data_dir, const fs::path& out_dir,
                      const TrainOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path ckpt_file = out_dir / "checkpoint.bin";
  const bool resuming = options.resume && fs::exists(ckpt_file);
  if (!resuming && !config_file) throw UsageError(options.resume ? "nothing to resume in " + out_dir.string() + " and no --config given" : "--config is required");
  train::Checkpoint ck;
  if (resuming) {
    ck = train::load_checkpoint(ckpt_file);
    if (options.epochs) ck.config.epochs = *options.epochs;
    spdlog::info("resuming {} at step {}", out_dir.string(), ck.step);
  } else {
    auto config = parse_config_file(*config_file);
    if (options.seed) config.seed = *options.seed;
    if (options.epochs) config.epochs = *options.epochs;
    ck = train::initial_checkpoint(config);
  }
  const auto data = load_data(data_dir);
  try {
    train::check_compatible(ck.config, data);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "config.json", train::train_config_to_json(ck.config));
  const fs::path loss_file = out_dir / "loss.csv", metric_file = out_dir / "metrics.csv";
  if (resuming) {
    truncate_ledger(loss_file, train::LossRow::csv_header(), 0, ck.step);
    truncate_ledger(metric_file, train::EvalRow::csv_header(), 1, ck.step);
  } else {
    write_text(loss_file, train::LossRow::csv_header() + "\n");
    write_text(metric_file, train::EvalRow::csv_header() + "\n");
  }
  std::ofstream loss(loss_file, std::ios::app), evals(metric_file, std::ios::app);
  train::Callbacks cb;
  cb.on_step = [&](const train::LossRow& r) { loss << r.csv_row() << "\n"; };
  cb.on_eval = [&](const train::EvalRow& r) { evals << r.csv_row() << "\n" << std::flush; };
  cb.on_epoch_end = [&](const train::Checkpoint& c) {
    loss.flush();
    if (!loss || !evals) throw std::runtime_error("failed writing ledgers in " + out_dir.string());
    train::save_checkpoint(c, ckpt_file);
  };
  train::TrainResult result;
  try {
    result = train::resume(ck, data, cb);
  } catch (const train::NonFiniteLoss& e) {
    loss.flush();
    train::save_checkpoint(e.last_finite, ckpt_file);
    throw std::runtime_error(std::string(e.what()) + "; last finite state kept in " + ckpt_file.string());
  }
  loss.close();
  evals.close();
  train::save_checkpoint(result.checkpoint, ckpt_file);

  Rng hist_rng = Rng::derived(result.checkpoint.config.seed, 3);
  metrics::write_histogram(split_histogram(result.checkpoint, data.valid, hist_rng), out_dir / "histogram.csv");

  RunManifest m;
  m.run_id = options.run_id;
  m.seed = result.checkpoint.config.seed;
  m.config = train::train_config_to_json(result.checkpoint.config);
  m.artifacts = {{"checkpoint", "checkpoint.bin"},
                 {"config", "config.json"},
                 {"loss_ledger", "loss.csv"},
                 {"metric_ledger", "metrics.csv"},
                 {"histogram", "histogram.csv"}};
  m.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(out_dir / "manifest.json", m.to_json());
  return m;
}

metrics::MetricsReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir,
                                const EvalOptions& options) {
  if (options.s_prior < 1 || options.s_post < 1 || options.chunk < 1)
    throw UsageError("--s-prior, --s-post and --chunk must be positive");
  const auto ck = train::load_checkpoint(checkpoint);
  const auto data = load_data(data_dir);
  try {
    train::check_compatible(ck.config, data);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto& split = pick_split(data, options.split);
  auto mc = ck.config.metrics;
  mc.s_prior = options.s_prior;
  mc.s_post = options.s_post;
  mc.mi_chunk = options.chunk;
  Rng rng(options.seed);
  const auto report = train::evaluate_split(ck, split, mc, rng, options.limit);
  fs::create_directories(out_dir);
  write_text(out_dir / "report.csv", metrics::MetricsReport::csv_header() + "\n" + report.csv_row() + "\n");
  if (options.histogram) metrics::write_histogram(split_histogram(ck, split, rng), out_dir / "histogram.csv");
  return report;
}

std::vector<metrics::InterpolationResult> cmd_interpolate(const fs::path& checkpoint, const fs::path& data_dir,
                                                          const fs::path& out_dir, const InterpolateOptions& options) {
  const auto ck = train::load_checkpoint(checkpoint);
  if (ck.config.model.mode != model::Mode::kSequence) throw UsageError("interpolate needs a sequence model");
  const auto data = load_data(data_dir);
  try {
    train::check_compatible(ck.config, data);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto& split = pick_split(data, options.split);
  if (split.size() < 2) throw UsageError("interpolate needs at least two sequences");
  const obj::BnStats* bn = ck.bn ? &*ck.bn : nullptr;
  Rng rng(options.seed);
  std::vector<metrics::InterpolationResult> out;
  std::string table = "pair,a,b,i,lambda,score,decoded\n", text;
  for (std::size_t p = 0; p < options.pairs; ++p) {
    const std::size_t a = rng.index(split.size());
    std::size_t b = rng.index(split.size() - 1);
    if (b >= a) ++b;
    auto r = metrics::interpolate(ck.config.model, ck.params, bn, split.sequences[a], split.sequences[b], options.slerp);
    for (std::size_t i = 0; i < r.decoded.size(); ++i) {
      const auto words = tokens_text(r.decoded[i]);
      table += std::to_string(p) + "," + std::to_string(a) + "," + std::to_string(b) + "," + std::to_string(i) + "," +
               fmt(r.lambdas[i]) + "," + fmt(r.scores[i]) + "," + words + "\n";
      text += words + "\n";
    }
    out.push_back(std::move(r));
  }
  std::string curve = "i,lambda,mean_score,se\n";
  for (std::size_t i = 0; i < 11; ++i) {
    std::vector<double> s;
    for (const auto& r : out) s.push_back(r.scores[i]);
    const auto e = s.empty() ? metrics::Estimate{} : metrics::mean_and_se(s);
    curve += std::to_string(i) + "," + fmt(metrics::interpolation_weights(i).second) + "," + fmt(e.value) + "," +
             fmt(e.se) + "\n";
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "interpolation.csv", table);
  write_text(out_dir / "decoded.txt", text);
  write_text(out_dir / "curve.csv", curve);
  return out;
}

std::vector<MatrixCell> expand_matrix(const std::string& text) {
  json j;
  try {
    j = jsonutil::parse_located(text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto fail = [](const std::string& path, const std::string& what) { throw UsageError("field " + path + ": " + what); };
  if (!j.is_object()) fail("(root)", "expected an object");
  const json base = j.value("base", json::object());
  if (!base.is_object()) fail("base", "expected an object");
  if (!j.contains("cells") || !j["cells"].is_array() || j["cells"].empty()) fail("cells", "expected a non-empty array");
  std::vector<MatrixCell> cells;
  for (std::size_t c = 0; c < j["cells"].size(); ++c) {
    const auto& cell = j["cells"][c];
    const std::string path = "cells[" + std::to_string(c) + "]";
    if (!cell.is_object() || !cell.contains("id") || !cell["id"].is_string()) fail(path + ".id", "expected a string");
    const std::string id = cell["id"];
    if (id.empty() || id.find_first_of("/\\") != std::string::npos || id == "." || id == "..")
      fail(path + ".id", "not usable as a directory name");
    json patch = cell;
    patch.erase("id");
    patch.erase("grid");
    json merged = base;
    merged.merge_patch(patch);
    std::vector<std::pair<std::string, json>> combos{{id, merged}};
    if (cell.contains("grid")) {
      const auto& grid = cell["grid"];
      if (!grid.is_object()) fail(path + ".grid", "expected an object of value lists");
      for (auto it = grid.begin(); it != grid.end(); ++it) {
        if (!it.value().is_array() || it.value().empty())
          fail(path + ".grid." + it.key(), "expected a non-empty array");
        std::string pointer = "/" + it.key();
        for (auto& ch : pointer)
          if (ch == '.') ch = '/';
        const std::string leaf = it.key().substr(it.key().rfind('.') + 1);
        std::vector<std::pair<std::string, json>> next;
        for (const auto& [cid, cfg] : combos)
          for (const auto& v : it.value()) {
            json k = cfg;
            k[json::json_pointer(pointer)] = v;
            next.emplace_back(cid + "_" + leaf + "=" + (v.is_string() ? v.get<std::string>() : v.dump()), k);
          }
        combos = std::move(next);
      }
    }
    for (auto& [cid, cfg] : combos) {
      try {
        train::parse_train_config(cfg.dump());
      } catch (const std::invalid_argument& e) {
        throw UsageError("matrix cell " + cid + ": " + e.what());
      }
      cells.push_back({cid, cfg.dump(2) + "\n"});
    }
  }
  std::set<std::string> seen;
  for (const auto& c : cells)
    if (!seen.insert(c.id).second) throw UsageError("duplicate matrix cell id '" + c.id + "'");
  return cells;
}

std::vector<RunManifest> cmd_matrix(const fs::path& matrix_file, const fs::path& data_dir, const fs::path& out_dir,
                                    const MatrixOptions& options) {
  const auto cells = expand_matrix(read_text(matrix_file));
  load_data(data_dir);
  fs::create_directories(out_dir);
  std::vector<RunManifest> manifests(cells.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto m = out_dir / cells[i].id / "manifest.json";
    if (fs::exists(m)) manifests[i] = RunManifest::from_json(read_text(m));
    else todo.push_back(i);
  }
  if (!todo.empty() && todo.size() < cells.size())
    spdlog::info("matrix: {} of {} cells done, resuming at {}", cells.size() - todo.size(), cells.size(),
                 cells[todo.front()].id);
  auto run_cell = [&](std::size_t i) {
    const auto dir = out_dir / cells[i].id;
    fs::create_directories(dir);
    write_text(dir / "cell.json", cells[i].config);
    TrainOptions o;
    o.resume = true;
    o.run_id = cells[i].id;
    manifests[i] = cmd_train(dir / "cell.json", data_dir, dir, o);
  };
  if (options.parallel && todo.size() > 1) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    const std::size_t workers = std::min<std::size_t>(todo.size(), std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t k; (k = next++) < todo.size();) {
          try {
            run_cell(todo[k]);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  } else {
    for (auto i : todo) run_cell(i);
  }
  std::string merged = "run_id," + train::EvalRow::csv_header() + "\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::ifstream in(out_dir / cells[i].id / manifests[i].artifacts.at("metric_ledger"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty()) merged += cells[i].id + "," + line + "\n";
  }
  write_text(out_dir / "merged.csv", merged);
  return manifests;
}

namespace {

constexpr const char* kExampleMatrix = R"({
  "base": {"epochs": 20, "objective": {"kind": "elbo"}},
  "cells": [
    {"id": "elbo"},
    {"id": "beta", "objective": {"kind": "beta", "beta": 0.2}},
    {"id": "dg", "objective": {"kind": "dg-marginal"}, "grid": {"objective.aggregation_size": [1, 4, 32]}}
  ]
}
)";

void setup_logging(const std::string& level) {
  static std::once_flag once;
  std::call_once(once, [] { spdlog::set_default_logger(spdlog::stderr_color_mt("dgvae")); });
  const auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") throw UsageError("unknown log level '" + level + "'");
  spdlog::set_level(lvl);
}

void need(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

}  // namespace

int main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Density-gap VAE experiments"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  std::string config, data, outdir, checkpoint, split_name = "test";
  std::uint64_t seed = 1;
  bool dump = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  gen->add_option("--config", config, "data spec JSON (default grammar when omitted)");
  gen->add_option("--out", outdir, "output directory");
  gen->add_option("--seed", seed, "generation seed");
  gen->add_flag("--dump-config", dump, "print the default data spec");

  auto* tr = app.add_subcommand("train", "train one model");
  std::optional<std::uint64_t> train_seed;
  std::optional<std::size_t> epochs;
  bool resume = false;
  std::string run_id = "run";
  tr->add_option("--config", config, "training config JSON");
  tr->add_option("--data", data, "dataset directory");
  tr->add_option("--out", outdir, "run directory");
  tr->add_option("--seed", train_seed, "override the config seed");
  tr->add_option("--epochs", epochs, "override the epoch budget");
  tr->add_flag("--resume", resume, "continue from <out>/checkpoint.bin when present");
  tr->add_option("--run-id", run_id, "id written to the manifest");
  tr->add_flag("--dump-config", dump, "print the default training config");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  EvalOptions eo;
  bool no_hist = false;
  ev->add_option("--checkpoint", checkpoint, "checkpoint file");
  ev->add_option("--data", data, "dataset directory");
  ev->add_option("--out", outdir, "output directory");
  ev->add_option("--s-prior", eo.s_prior, "prior samples per datapoint");
  ev->add_option("--s-post", eo.s_post, "posterior samples per datapoint");
  ev->add_option("--chunk", eo.chunk, "MI chunk size");
  ev->add_option("--limit", eo.limit, "score only the first N rows");
  ev->add_option("--split", split_name, "train, valid or test");
  ev->add_option("--seed", seed, "evaluation seed");
  ev->add_flag("--no-histogram", no_hist, "skip the histogram table");
  ev->add_flag("--dump-config", dump, "print the default evaluation settings");

  auto* ip = app.add_subcommand("interpolate", "score latent interpolations");
  InterpolateOptions io;
  ip->add_option("--checkpoint", checkpoint, "checkpoint file");
  ip->add_option("--data", data, "dataset directory");
  ip->add_option("--out", outdir, "output directory");
  ip->add_option("--pairs", io.pairs, "number of sentence pairs");
  ip->add_option("--seed", seed, "pair sampling seed");
  ip->add_option("--split", split_name, "train, valid or test");
  ip->add_flag("--slerp", io.slerp, "spherical interpolation for vMF models");

  auto* mx = app.add_subcommand("matrix", "run an experiment matrix");
  MatrixOptions mo;
  mx->add_option("--config", config, "matrix JSON");
  mx->add_option("--data", data, "dataset directory");
  mx->add_option("--out", outdir, "output directory");
  mx->add_flag("--parallel", mo.parallel, "run cells on separate threads");
  mx->add_flag("--dump-config", dump, "print an example matrix");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) {
        out << app.help();
        return 0;
      }
      throw UsageError(e.what());
    }
    setup_logging(log_level);
    if (gen->parsed()) {
      if (dump) {
        out << corpus::data_spec_to_json(corpus::DataSpec{});
        return 0;
      }
      need(outdir, "--out");
      cmd_gen_data(config.empty() ? std::nullopt : std::optional<fs::path>(config), outdir, seed);
    } else if (tr->parsed()) {
      if (dump) {
        train::TrainConfig c;
        c.harmonize();
        out << train::train_config_to_json(c);
        return 0;
      }
      need(data, "--data");
      need(outdir, "--out");
      TrainOptions o{train_seed, epochs, resume, run_id};
      auto m = cmd_train(config.empty() ? std::nullopt : std::optional<fs::path>(config), data, outdir, o);
      out << (fs::path(outdir) / "manifest.json").string() << "\n";
    } else if (ev->parsed()) {
      if (dump) {
        const json j = {{"s_prior", eo.s_prior}, {"s_post", eo.s_post}, {"chunk", eo.chunk},
                        {"limit", eo.limit},     {"split", split_name}, {"seed", seed}};
        out << j.dump(2) << "\n";
        return 0;
      }
      need(checkpoint, "--checkpoint");
      need(data, "--data");
      need(outdir, "--out");
      eo.split = split_name;
      eo.seed = seed;
      eo.histogram = !no_hist;
      auto r = cmd_eval(checkpoint, data, outdir, eo);
      out << metrics::MetricsReport::csv_header() << "\n" << r.csv_row() << "\n";
    } else if (ip->parsed()) {
      need(checkpoint, "--checkpoint");
      need(data, "--data");
      need(outdir, "--out");
      io.seed = seed;
      io.split = split_name;
      cmd_interpolate(checkpoint, data, outdir, io);
      out << read_text(fs::path(outdir) / "curve.csv");
    } else if (mx->parsed()) {
      if (dump) {
        out << kExampleMatrix;
        return 0;
      }
      need(config, "--config");
      need(data, "--data");
      need(outdir, "--out");
      auto ms = cmd_matrix(config, data, outdir, mo);
      out << ms.size() << " runs; merged ledger " << (fs::path(outdir) / "merged.csv").string() << "\n";
    }
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace dgvae::cli
