#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "metafc/cli.hpp"

using namespace metafc;
using namespace metafc::cli;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# tiny run used by the CLI tests
seeds = 0, 1
pool = identity; gn:sigma=0.04; dropout:p=0.3
model.height = 16
model.width = 16
model.message_len = 8
model.feature_dim = 16
train.total_steps = 4
train.batch_size = 4
train.eval_every = 2
train.val_images = 4
data.count = 40
eval.max_images = 4
)";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("metafc_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

ExperimentConfig tiny(const fs::path& out) {
  auto c = parse_config(kTiny);
  c.output_dir = out;
  return c;
}

// key and line of the ConfigError thrown for `text`
std::pair<std::string, int> error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return {e.key(), e.line()};
  }
  return {"", -1};
}

}  // namespace

TEST_CASE("config parsing reads every section") {
  const auto c = parse_config(kTiny);
  CHECK(c.seeds == std::vector<uint64_t>{0, 1});
  CHECK(c.pool.size() == 3);
  CHECK(c.model.height == 16);
  CHECK(c.train.total_steps == 4);
  CHECK(c.data.count == 40);
  CHECK(c.eval.max_images == 4);
  CHECK(c.train.strategy == training::Strategy::MetaFC);
}

TEST_CASE("resolved config round-trips") {
  auto c = parse_config(kTiny);
  c.train.inner_lr = 0.1;
  c.model.embed_strength = 0.07;
  c.compare.target_psnr = 31.5;
  c.eval.scale = eval::Scale::Paper;
  c.eval.suites = {eval::SuiteName::Combined};
  const std::string text = c.resolved();
  const auto back = parse_config(text);
  CHECK(back.resolved() == text);
  CHECK(*back.train.inner_lr == 0.1);
  CHECK(back.model.embed_strength == 0.07);
  CHECK(back.eval.scale == eval::Scale::Paper);
}

TEST_CASE("config errors name the key and the line") {
  CHECK(error_of("pool = identity; gn:sigma=0.04\nmodel.hieght = 16\n") == std::pair<std::string, int>{"model.hieght", 2});
  CHECK(error_of("seeds = 1\n") == std::pair<std::string, int>{"pool", 0});
  CHECK(error_of("pool = identity; gn:sigma=0.04\n\ntrain.batch_size = many\n") ==
        std::pair<std::string, int>{"train.batch_size", 3});
  CHECK(error_of("pool = identity\npool = identity; gb:sigma=2\n") == std::pair<std::string, int>{"pool", 2});
  CHECK(error_of("pool = identity; warp:x=1\n") == std::pair<std::string, int>{"pool", 1});
  CHECK(error_of("pool = identity\n") == std::pair<std::string, int>{"pool", 1});  // a pool needs two entries
  CHECK(error_of("pool = identity; gn:sigma=0.04\nmodel.height = 12\n") == std::pair<std::string, int>{"model.height", 2});
  CHECK(error_of("pool = identity; gn:sigma=0.04\ntrain.outer_lr = -1\n") == std::pair<std::string, int>{"train.outer_lr", 2});
  CHECK(error_of("pool = identity; gn:sigma=0.04\njust words\n").second == 2);
  CHECK(error_of("pool = identity; gn:sigma=0.04\ntrain.strategy = maml\n") == std::pair<std::string, int>{"train.strategy", 2});
}

TEST_CASE("overrides") {
  auto c = parse_config(kTiny);
  apply_overrides(c, {fs::path("elsewhere"), 7, true});
  CHECK(c.output_dir == "elsewhere");
  CHECK(c.seeds == std::vector<uint64_t>{7});
  CHECK(c.model.height == 64);
  CHECK(c.model.message_len == 30);
  CHECK(c.eval.scale == eval::Scale::Desk);
}

TEST_CASE("train writes per-run artifacts and a fixed report schema") {
  const auto out = scratch("train");
  std::ostringstream log;
  CHECK(run_experiment(tiny(out), log) == 0);
  for (const char* seed : {"seed0", "seed1"}) {
    for (const char* f : {"losses.csv", "val_metrics.csv", "best.ckpt", "last.ckpt"}) {
      CHECK(fs::exists(out / "metafc" / seed / f));
    }
  }
  for (const char* f : {"config.resolved", "report.csv", "report.md", "loss_curves.svg", "acc_bars.svg"}) CHECK(fs::exists(out / f));

  const std::string csv = slurp(out / "report.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "strategy,seed,suite,distortion,acc_percent,n_images,psnr_db,ssim,embed_strength,config_hash");
  // two seeds x (9 high-intensity + 2 combined + 8 unknown) rows
  int rows = 0;
  for (std::string l; std::getline(lines, l);) {
    ++rows;
    CHECK(std::count(l.begin(), l.end(), ',') == 9);
  }
  CHECK(rows == 2 * 19);
  CHECK(parse_config(slurp(out / "config.resolved")).resolved() == slurp(out / "config.resolved"));
}

TEST_CASE("repeated runs are byte identical") {
  const auto a = scratch("det_a"), b = scratch("det_b");
  std::ostringstream log;
  run_experiment(tiny(a), log);
  run_experiment(tiny(b), log);
  CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));
  CHECK(slurp(a / "metafc/seed1/losses.csv") == slurp(b / "metafc/seed1/losses.csv"));
  CHECK(slurp(a / "metafc/seed1/val_metrics.csv") == slurp(b / "metafc/seed1/val_metrics.csv"));
}

TEST_CASE("eval reproduces the training report from best.ckpt") {
  const auto out = scratch("eval_src"), ev = scratch("eval_out");
  std::ostringstream log;
  auto c = tiny(out);
  c.seeds = {1};
  run_experiment(c, log);
  c.output_dir = ev;
  CHECK(run_eval(c, out / "metafc/seed1/best.ckpt", std::nullopt, log) == 0);
  CHECK(slurp(ev / "report.csv") == slurp(out / "report.csv"));
  CHECK(run_eval(c, out / "metafc/seed1/best.ckpt", 0.2, log) == 0);
  CHECK(slurp(ev / "report.csv") != slurp(out / "report.csv"));
}

TEST_CASE("psnr matching lands within tolerance") {
  const auto c = tiny(scratch("match"));
  const auto ds = open_dataset(c);
  const model::ConvModel net(c.model);
  const auto params = net.init(3);
  const double p0 = test_psnr(c, params, 0.05, ds);
  CHECK(test_psnr(c, params, 0.1, ds) < p0);
  for (double target : {p0 - 4.0, p0 + 3.0}) {
    const auto m = match_psnr(c, params, 0.05, target, ds);
    CHECK(m.converged);
    CHECK(std::abs(m.psnr - target) <= c.compare.psnr_tolerance);
    CHECK(test_psnr(c, params, m.strength, ds) == m.psnr);
  }
}

TEST_CASE("compare emits the side-by-side table") {
  const auto out = scratch("compare");
  std::ostringstream log;
  CHECK(run_compare(tiny(out), log) == 0);
  for (const char* f : {"comparison.csv", "psnr_matching.csv", "timing.json", "report.csv", "report.md"}) CHECK(fs::exists(out / f));
  const std::string cmp = slurp(out / "comparison.csv");
  CHECK(cmp.rfind("suite,distortion,seed,srd_acc,metafc_acc,delta\n", 0) == 0);
  CHECK(cmp.find(",mean,") != std::string::npos);
  CHECK(fs::exists(out / "srd/seed0/losses.csv"));
  CHECK(fs::exists(out / "metafc/seed1/losses.csv"));
}

TEST_CASE("ablate emits four variants") {
  const auto out = scratch("ablate");
  std::ostringstream log;
  auto c = tiny(out);
  c.seeds = {0};
  CHECK(run_ablate(c, log) == 0);
  std::istringstream in(slurp(out / "ablation.csv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "variant,strategy,high_intensity,combined,unknown");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 4);
  // the SRD-equivalent variant logs exactly what SRD logs
  auto srd = c;
  srd.output_dir = scratch("ablate_srd");
  srd.train.strategy = training::Strategy::SRD;
  run_experiment(srd, log);
  CHECK(slurp(out / "metatestonly/seed0/losses.csv") == slurp(srd.output_dir / "srd/seed0/losses.csv"));

  // fc column (index 4) is zero for every variant without the consistency term
  for (const char* dir : {"metafc_nofc", "metatrainonly", "metatestonly"}) {
    std::istringstream lines(slurp(out / dir / "seed0/losses.csv"));
    std::getline(lines, line);
    int n = 0;
    for (std::string l; std::getline(lines, l); ++n) {
      std::vector<std::string> cells;
      std::istringstream row(l);
      for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
      REQUIRE(cells.size() == 10);
      CHECK(std::stod(cells[4]) == 0.0);
    }
    CHECK(n == c.train.total_steps);
  }
}

TEST_CASE("csv schemas match the golden headers") {
  const fs::path golden = METAFC_GOLDEN_DIR;
  const auto out = scratch("golden");
  std::ostringstream log;
  auto c = tiny(out);
  c.seeds = {0};
  run_compare(c, log);
  CHECK(first_line(out / "report.csv") == first_line(golden / "report.csv.header"));
  CHECK(first_line(out / "comparison.csv") == first_line(golden / "comparison.csv.header"));
  CHECK(first_line(out / "psnr_matching.csv") == first_line(golden / "psnr_matching.csv.header"));
  CHECK(first_line(out / "srd/seed0/losses.csv") == first_line(golden / "losses.csv.header"));
  CHECK(first_line(out / "metafc/seed0/losses.csv") == first_line(golden / "losses.csv.header"));
  CHECK(fs::exists(out / "split_manifest.json"));

  const auto ab = scratch("golden_ablate");
  c.output_dir = ab;
  run_ablate(c, log);
  CHECK(first_line(ab / "ablation.csv") == first_line(golden / "ablation.csv.header"));
  CHECK(first_line(ab / "report.csv") == first_line(golden / "report.csv.header"));
}

TEST_CASE("report regenerates plots and rejects missing directories") {
  const auto out = scratch("report");
  std::ostringstream log;
  auto c = tiny(out);
  c.seeds = {0};
  run_experiment(c, log);
  fs::remove(out / "loss_curves.svg");
  fs::remove(out / "acc_bars.svg");
  CHECK(run_report(out, log) == 0);
  CHECK(slurp(out / "loss_curves.svg").rfind("<svg", 0) == 0);
  CHECK(slurp(out / "acc_bars.svg").find("<rect") != std::string::npos);
  CHECK_THROWS(run_report(out / "missing", log));
}
