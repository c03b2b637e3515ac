// metafc: train, evaluate, compare and ablate watermark models.

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "metafc/cli.hpp"

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<uint64_t> seed;
  bool desk_scale = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config file")->required()->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory (replaces output_dir)");
  app->add_option("--seed-override", c.seed, "run a single seed instead of the configured list");
  app->add_flag("--desk-scale", c.desk_scale, "64x64 images, 30-bit messages, desk-scale suites");
}

metafc::cli::ExperimentConfig load(const Common& c) {
  auto config = metafc::cli::load_config(c.config);
  metafc::cli::Overrides o;
  if (!c.out.empty()) o.out = c.out;
  o.seed = c.seed;
  o.desk_scale = c.desk_scale;
  metafc::cli::apply_overrides(config, o);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust watermark training with meta-learned distortion pools"};
  app.require_subcommand(1);

  Common train_opt, eval_opt, compare_opt, ablate_opt;
  auto* train = app.add_subcommand("train", "train the configured strategy for every seed and evaluate it");
  add_common(train, train_opt);

  auto* evaluate = app.add_subcommand("eval", "evaluate a checkpoint on the configured suites");
  add_common(evaluate, eval_opt);
  std::string checkpoint;
  std::optional<double> strength;
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--embed-strength", strength, "override the embedding strength");

  auto* compare = app.add_subcommand("compare", "SRD vs Meta-FC at matched PSNR");
  add_common(compare, compare_opt);

  auto* ablate = app.add_subcommand("ablate", "Meta-FC ablation variants");
  add_common(ablate, ablate_opt);

  auto* report = app.add_subcommand("report", "regenerate plots from the CSVs in a run directory");
  std::string report_dir;
  report->add_option("dir", report_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return metafc::cli::run_experiment(load(train_opt), std::cout);
    if (*evaluate) return metafc::cli::run_eval(load(eval_opt), checkpoint, strength, std::cout);
    if (*compare) return metafc::cli::run_compare(load(compare_opt), std::cout);
    if (*ablate) return metafc::cli::run_ablate(load(ablate_opt), std::cout);
    if (*report) return metafc::cli::run_report(report_dir, std::cout);
  } catch (const metafc::cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
