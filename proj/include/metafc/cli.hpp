#pragma once

// Experiment configuration and the runners behind the `metafc` tool.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "metafc/evaluation.hpp"
#include "metafc/model.hpp"
#include "metafc/training.hpp"

namespace metafc::cli {

// Parse or validation failure; names the key and, when known, the line.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, int line, const std::string& message);
  const std::string& key() const { return key_; }
  int line() const { return line_; }
  const std::string& detail() const { return detail_; }

 private:
  std::string key_;
  int line_;
  std::string detail_;
};

struct DataConfig {
  data::SourceKind kind = data::SourceKind::Synthetic;
  std::filesystem::path path;  // folder sources
  int64_t count = 625;         // synthetic sources; 80% go to training
  uint64_t seed = 1;           // synthetic content and split permutation
};

struct EvalConfig {
  std::vector<eval::SuiteName> suites{eval::SuiteName::HighIntensity, eval::SuiteName::Combined, eval::SuiteName::Unknown};
  eval::Scale scale = eval::Scale::Desk;
  uint64_t seed = 1234;    // distortion and message seed of every report
  int64_t max_images = 0;  // 0: whole test split
};

struct CompareConfig {
  double psnr_tolerance = 0.3;
  int max_iterations = 12;
  double target_psnr = 0.0;  // > 0: both strategies are matched to this value
};

struct ExperimentConfig {
  model::ModelConfig model;
  training::TrainConfig train;
  DataConfig data;
  std::vector<std::string> pool;  // distortion strings
  EvalConfig eval;
  CompareConfig compare;
  std::vector<uint64_t> seeds{0};
  std::filesystem::path output_dir = "runs/default";

  // Every key in canonical order; parse_config(resolved()) reproduces the config.
  std::string resolved() const;
  void validate() const;
};

// Flat `key = value` lines with dotted sections; `#` starts a comment. The
// `pool` key is required. Lists are comma separated except `pool`, which uses
// `;` because distortion strings contain commas.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Overrides {
  std::optional<std::filesystem::path> out;
  std::optional<uint64_t> seed;
  bool desk_scale = false;
};

// --out replaces output_dir; --seed-override replaces the seed list;
// --desk-scale sets 64x64 images, L = 30 and desk-scale suites.
void apply_overrides(ExperimentConfig& config, const Overrides& o);

data::DatasetHandle open_dataset(const ExperimentConfig& config);
noise::NoisePool make_pool(const ExperimentConfig& config);

// One trained and evaluated (strategy, seed) pair.
struct RunRecord {
  training::Strategy strategy = training::Strategy::MetaFC;
  uint64_t seed = 0;
  std::filesystem::path dir;
  model::ParamSet params;     // best checkpoint
  double embed_strength = 0;  // strength used for the report
  eval::EvalReport report;
  double train_seconds = 0;
};

// `report.csv` schema shared by every subcommand.
std::string runs_csv(const std::vector<RunRecord>& runs);
std::string runs_markdown(const std::vector<RunRecord>& runs, const std::string& title);

// Trains `strategy` for every seed and evaluates the configured suites.
// Writes <out>/<strategy>/seed<k>/{losses.csv,val_metrics.csv,best.ckpt,last.ckpt}.
std::vector<RunRecord> train_and_evaluate(const ExperimentConfig& config, training::Strategy strategy, std::ostream& log);

// Reports for an existing parameter set at a given embedding strength.
eval::EvalReport evaluate_params(const ExperimentConfig& config, const model::ParamSet& params, double embed_strength,
                                 const data::DatasetHandle& dataset);

// PSNR of the watermarked test split at `embed_strength`.
double test_psnr(const ExperimentConfig& config, const model::ParamSet& params, double embed_strength,
                 const data::DatasetHandle& dataset);

struct Bisection {
  double strength = 0;
  double psnr = 0;
  int iterations = 0;
  bool converged = false;
};

// Embedding strength whose test PSNR is within `tolerance` dB of `target`.
Bisection match_psnr(const ExperimentConfig& config, const model::ParamSet& params, double start_strength, double target,
                     const data::DatasetHandle& dataset);

// Subcommands. Each writes config.resolved, report.csv and report.md into
// the output directory and returns a process exit status.
int run_experiment(const ExperimentConfig& config, std::ostream& log);
int run_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
             std::optional<double> embed_strength, std::ostream& log);
int run_compare(const ExperimentConfig& config, std::ostream& log);
int run_ablate(const ExperimentConfig& config, std::ostream& log);
// Regenerates report.md-adjacent plots (loss_curves.svg, acc_bars.svg) from
// the CSVs under `dir`.
int run_report(const std::filesystem::path& dir, std::ostream& log);

// Static SVG line chart of one column of each losses.csv.
std::string loss_curve_svg(const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series,
                           const std::string& title);
// Static SVG grouped bar chart: groups x bars.
std::string bar_chart_svg(const std::vector<std::string>& groups, const std::vector<std::string>& bars,
                          const std::vector<std::vector<double>>& values, const std::string& title);

}  // namespace metafc::cli
