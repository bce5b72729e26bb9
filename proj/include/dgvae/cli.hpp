#pragma once

// Command implementations behind the dgvae executable. Each writes tidy
// files into an output directory; main() maps failures to exit codes
// (1 usage or configuration, 2 runtime) with "error:" lines on stderr.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgvae/metrics.hpp"
#include "dgvae/trainer.hpp"

namespace dgvae::cli {

namespace fs = std::filesystem;

// Bad flags, config files or inputs; exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunManifest {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config;                           // harmonized config JSON
  std::map<std::string, std::string> artifacts; // role -> path relative to the run directory
  double wall_clock_seconds = 0.0;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

void cmd_gen_data(const std::optional<fs::path>& spec_file, const fs::path& out_dir, std::uint64_t seed);

struct TrainOptions {
  std::optional<std::uint64_t> seed;    // overrides the config seed
  std::optional<std::size_t> epochs;    // overrides the config epoch budget
  bool resume = false;                  // continue from out_dir/checkpoint.bin
  std::string run_id = "run";
};
// With resume set, config_file may be empty (the checkpoint's config is used).
RunManifest cmd_train(const std::optional<fs::path>& config_file, const fs::path& data_dir, const fs::path& out_dir,
                      const TrainOptions& options = {});

struct EvalOptions {
  std::size_t s_prior = 128;
  std::size_t s_post = 128;
  std::size_t chunk = 512;
  std::size_t limit = 0;           // leading rows of the split; 0 = all
  std::string split = "test";
  std::uint64_t seed = 1;
  bool histogram = true;
};
metrics::MetricsReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir,
                                const EvalOptions& options = {});

struct InterpolateOptions {
  std::size_t pairs = 100;
  std::uint64_t seed = 1;
  std::string split = "test";
  bool slerp = false;
};
// Writes interpolation.csv (pair, i, lambda, score, decoded), decoded.txt
// (one sequence per line in the same order) and curve.csv (mean score per lambda).
std::vector<metrics::InterpolationResult> cmd_interpolate(const fs::path& checkpoint, const fs::path& data_dir,
                                                          const fs::path& out_dir,
                                                          const InterpolateOptions& options = {});

// A matrix file holds a base config and a list of cells; each cell patches
// the base and may expand a grid of dotted-key value lists into one run per
// combination.
struct MatrixCell {
  std::string id;
  std::string config;  // merged config JSON
};
std::vector<MatrixCell> expand_matrix(const std::string& text);

struct MatrixOptions {
  bool parallel = false;
};
// Runs every cell into out_dir/<id>/ and writes out_dir/merged.csv. Cells
// with a manifest are skipped; the first missing one resumes from its last
// checkpoint when present.
std::vector<RunManifest> cmd_matrix(const fs::path& matrix_file, const fs::path& data_dir, const fs::path& out_dir,
                                    const MatrixOptions& options = {});

// Entry point used by the executable.
int main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dgvae::cli
