#include "metafc/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "metafc/rng.hpp"

namespace metafc::cli {

namespace {

namespace fs = std::filesystem;
using training::Strategy;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = s.find(sep, start);
    const std::string item = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!item.empty()) out.push_back(item);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

int64_t to_int(const std::string& key, int line, const std::string& v) {
  int64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError(key, line, "expected an integer, got '" + v + "'");
  return out;
}

uint64_t to_uint(const std::string& key, int line, const std::string& v) {
  uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError(key, line, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, int line, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key, line, "expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, int line, const std::string& v) {
  const std::string t = lower(v);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError(key, line, "expected true or false, got '" + v + "'");
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, int line, const std::string& value)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  const char* key;
  Setter set;
  Getter get;
};

template <class F>
Setter wrap(F f) {
  return [f](ExperimentConfig& c, const std::string& key, int line, const std::string& v) {
    try {
      f(c, key, line, v);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(key, line, e.what());
    }
  };
}

#define INT_FIELD(name, member)                                                                               \
  Field {                                                                                                     \
    name, wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) { c.member = to_int(k, l, v); }), \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                                    \
  }
#define DOUBLE_FIELD(name, member)                                                                               \
  Field {                                                                                                        \
    name, wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) { c.member = to_double(k, l, v); }), \
        [](const ExperimentConfig& c) { return shortest(c.member); }                                             \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"output_dir", wrap([](ExperimentConfig& c, const std::string&, int, const std::string& v) { c.output_dir = v; }),
       [](const ExperimentConfig& c) { return c.output_dir.string(); }},
      {"seeds",
       wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) {
         c.seeds.clear();
         for (const auto& s : split(v, ',')) c.seeds.push_back(to_uint(k, l, s));
       }),
       [](const ExperimentConfig& c) {
         std::string out;
         for (size_t i = 0; i < c.seeds.size(); ++i) out += (i ? ", " : "") + std::to_string(c.seeds[i]);
         return out;
       }},
      {"pool",
       wrap([](ExperimentConfig& c, const std::string&, int, const std::string& v) { c.pool = split(v, ';'); }),
       [](const ExperimentConfig& c) {
         std::string out;
         for (size_t i = 0; i < c.pool.size(); ++i) out += (i ? "; " : "") + c.pool[i];
         return out;
       }},
      INT_FIELD("model.height", model.height),
      INT_FIELD("model.width", model.width),
      INT_FIELD("model.channels", model.channels),
      INT_FIELD("model.message_len", model.message_len),
      INT_FIELD("model.hidden_channels", model.hidden_channels),
      INT_FIELD("model.num_blocks", model.num_blocks),
      DOUBLE_FIELD("model.embed_strength", model.embed_strength),
      INT_FIELD("model.feature_dim", model.feature_dim),
      {"train.strategy",
       wrap([](ExperimentConfig& c, const std::string&, int, const std::string& v) {
         c.train.strategy = training::parse_strategy(v);
       }),
       [](const ExperimentConfig& c) { return std::string(training::strategy_name(c.train.strategy)); }},
      DOUBLE_FIELD("train.outer_lr", train.outer_lr),
      {"train.inner_lr",
       wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) {
         if (lower(v) == "outer") {
           c.train.inner_lr.reset();
         } else {
           c.train.inner_lr = to_double(k, l, v);
         }
       }),
       [](const ExperimentConfig& c) { return c.train.inner_lr ? shortest(*c.train.inner_lr) : std::string("outer"); }},
      INT_FIELD("train.batch_size", train.batch_size),
      INT_FIELD("train.total_steps", train.total_steps),
      {"train.first_order",
       wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) { c.train.first_order = to_bool(k, l, v); }),
       [](const ExperimentConfig& c) { return std::string(c.train.first_order ? "true" : "false"); }},
      DOUBLE_FIELD("train.lambda_f", train.lambda_f),
      DOUBLE_FIELD("train.warm_fraction", train.warm_fraction),
      INT_FIELD("train.eval_every", train.eval_every),
      INT_FIELD("train.val_images", train.val_images),
      {"data.source",
       wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) {
         const std::string t = lower(v);
         if (t == "synthetic") {
           c.data.kind = data::SourceKind::Synthetic;
         } else if (t == "folder") {
           c.data.kind = data::SourceKind::Folder;
         } else {
           throw ConfigError(k, l, "expected synthetic or folder, got '" + v + "'");
         }
       }),
       [](const ExperimentConfig& c) {
         return std::string(c.data.kind == data::SourceKind::Synthetic ? "synthetic" : "folder");
       }},
      {"data.path", wrap([](ExperimentConfig& c, const std::string&, int, const std::string& v) { c.data.path = v; }),
       [](const ExperimentConfig& c) { return c.data.path.string(); }},
      INT_FIELD("data.count", data.count),
      {"data.seed",
       wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) { c.data.seed = to_uint(k, l, v); }),
       [](const ExperimentConfig& c) { return std::to_string(c.data.seed); }},
      {"eval.suites",
       wrap([](ExperimentConfig& c, const std::string&, int, const std::string& v) {
         c.eval.suites.clear();
         for (const auto& s : split(v, ',')) c.eval.suites.push_back(eval::parse_suite_name(s));
       }),
       [](const ExperimentConfig& c) {
         std::string out;
         for (size_t i = 0; i < c.eval.suites.size(); ++i) out += (i ? ", " : "") + std::string(eval::suite_name(c.eval.suites[i]));
         return out;
       }},
      {"eval.scale",
       wrap([](ExperimentConfig& c, const std::string&, int, const std::string& v) { c.eval.scale = eval::parse_scale(lower(v)); }),
       [](const ExperimentConfig& c) { return std::string(eval::scale_name(c.eval.scale)); }},
      {"eval.seed",
       wrap([](ExperimentConfig& c, const std::string& k, int l, const std::string& v) { c.eval.seed = to_uint(k, l, v); }),
       [](const ExperimentConfig& c) { return std::to_string(c.eval.seed); }},
      INT_FIELD("eval.max_images", eval.max_images),
      DOUBLE_FIELD("compare.psnr_tolerance", compare.psnr_tolerance),
      INT_FIELD("compare.max_iterations", compare.max_iterations),
      DOUBLE_FIELD("compare.target_psnr", compare.target_psnr),
  };
  return table;
}

#undef INT_FIELD
#undef DOUBLE_FIELD

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string run_dir_name(Strategy s) { return lower(training::strategy_name(s)); }

// Config text with the output directory removed, so the hash identifies the
// experiment rather than where it was written.
std::string hash_of(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.output_dir.clear();
  return eval::config_hash(c.resolved());
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(field);
      field.clear();
    } else if (c == '\n') {
      row.push_back(field);
      field.clear();
      rows.push_back(row);
      row.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(field);
    rows.push_back(row);
  }
  return rows;
}

void write_standard_outputs(const ExperimentConfig& config, const std::vector<RunRecord>& runs, const std::string& title) {
  write_file(config.output_dir / "report.csv", runs_csv(runs));
  write_file(config.output_dir / "report.md", runs_markdown(runs, title));
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

}  // namespace

ConfigError::ConfigError(std::string key, int line, const std::string& message)
    : std::invalid_argument((line > 0 ? "line " + std::to_string(line) + ": " : std::string()) + "'" + key + "': " + message),
      key_(std::move(key)),
      line_(line),
      detail_(message) {}

std::string ExperimentConfig::resolved() const {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    if (sec != section) {
      out += "\n";
      section = sec;
    }
    out += key + " = " + f.get(*this) + "\n";
  }
  return out;
}

void ExperimentConfig::validate() const {
  // model/train validation names the offending field in quotes
  auto rethrow = [](const std::string& section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      const auto a = msg.find('\'');
      const auto b = a == std::string::npos ? a : msg.find('\'', a + 1);
      const std::string key = b == std::string::npos || section == "pool" ? section : section + "." + msg.substr(a + 1, b - a - 1);
      throw ConfigError(key, 0, msg);
    }
  };
  rethrow("model", [&] { model.validate(); });
  rethrow("train", [&] { train.validate(); });
  if (pool.empty()) throw ConfigError("pool", 0, "missing required key");
  rethrow("pool", [&] {
    std::vector<noise::DistortionSpec> specs;
    for (const auto& p : pool) specs.push_back(noise::parse_spec(p));
    noise::NoisePool check(specs);
  });
  if (seeds.empty()) throw ConfigError("seeds", 0, "at least one seed is required");
  if (eval.suites.empty()) throw ConfigError("eval.suites", 0, "at least one suite is required");
  if (eval.max_images < 0) throw ConfigError("eval.max_images", 0, "must be >= 0");
  if (data.kind == data::SourceKind::Synthetic && data.count < 10) throw ConfigError("data.count", 0, "must be >= 10");
  if (data.kind == data::SourceKind::Folder && !fs::is_directory(data.path)) {
    throw ConfigError("data.path", 0, "'" + data.path.string() + "' is not a directory");
  }
  if (!(compare.psnr_tolerance > 0)) throw ConfigError("compare.psnr_tolerance", 0, "must be > 0");
  if (compare.max_iterations < 1) throw ConfigError("compare.max_iterations", 0, "must be >= 1");
  if (compare.target_psnr < 0) throw ConfigError("compare.target_psnr", 0, "must be >= 0");
  if (output_dir.empty()) throw ConfigError("output_dir", 0, "must not be empty");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig config;
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;
  std::map<std::string, int> seen;
  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string_view::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, line_no, "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(key, line_no, "unknown key");
    if (auto s = seen.find(key); s != seen.end()) {
      throw ConfigError(key, line_no, "duplicate key (first set on line " + std::to_string(s->second) + ")");
    }
    seen[key] = line_no;
    it->second->set(config, key, line_no, value);
  }
  if (!seen.count("pool")) throw ConfigError("pool", 0, "missing required key");
  try {
    config.validate();
  } catch (ConfigError& e) {
    const auto it = seen.find(e.key());
    if (it != seen.end() && e.line() == 0) {
      throw ConfigError(e.key(), it->second, e.detail());
    }
    throw;
  }
  return config;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(e.key(), e.line(), e.detail() + " (in " + path.string() + ")");
  }
}

void apply_overrides(ExperimentConfig& config, const Overrides& o) {
  if (o.out) config.output_dir = *o.out;
  if (o.seed) config.seeds = {*o.seed};
  if (o.desk_scale) {
    config.model.height = 64;
    config.model.width = 64;
    config.model.message_len = 30;
    config.model.feature_dim = std::max<int64_t>(config.model.feature_dim, 30);
    config.eval.scale = eval::Scale::Desk;
  }
  config.validate();
}

data::DatasetHandle open_dataset(const ExperimentConfig& config) {
  const data::ImageSize size{config.model.height, config.model.width};
  if (config.data.kind == data::SourceKind::Folder) {
    return data::load_folder(config.data.path, size, config.data.seed, config.model.channels);
  }
  return data::synth_images(config.data.count, size, config.data.seed, config.model.channels);
}

noise::NoisePool make_pool(const ExperimentConfig& config) {
  std::vector<noise::DistortionSpec> specs;
  for (const auto& p : config.pool) specs.push_back(noise::parse_spec(p));
  return noise::NoisePool(std::move(specs));
}

std::string runs_csv(const std::vector<RunRecord>& runs) {
  std::ostringstream out;
  out << "strategy,seed,suite,distortion,acc_percent,n_images,psnr_db,ssim,embed_strength,config_hash\n";
  for (const auto& r : runs) {
    for (const auto& row : r.report.rows) {
      out << training::strategy_name(r.strategy) << ',' << r.seed << ',' << csv_field(row.suite) << ','
          << csv_field(row.distortion) << ',' << eval::fmt(row.acc_percent, 4) << ',' << row.n_images << ','
          << eval::fmt(r.report.psnr_db, 4) << ',' << eval::fmt(r.report.ssim, 6) << ',' << shortest(r.embed_strength)
          << ',' << r.report.config_hash << '\n';
    }
  }
  return out.str();
}

std::string runs_markdown(const std::vector<RunRecord>& runs, const std::string& title) {
  std::ostringstream out;
  out << "# " << title << "\n";
  std::vector<Strategy> strategies;
  std::vector<std::string> suites;
  for (const auto& r : runs) {
    if (std::find(strategies.begin(), strategies.end(), r.strategy) == strategies.end()) strategies.push_back(r.strategy);
    for (const auto& row : r.report.rows) {
      if (std::find(suites.begin(), suites.end(), row.suite) == suites.end()) suites.push_back(row.suite);
    }
  }
  out << "\n## Image quality\n\n| Strategy | Seed | Embed strength | PSNR (dB) | SSIM |\n|---|---:|---:|---:|---:|\n";
  for (const auto& r : runs) {
    out << "| " << training::strategy_name(r.strategy) << " | " << r.seed << " | " << shortest(r.embed_strength) << " | "
        << eval::fmt(r.report.psnr_db, 2) << " | " << eval::fmt(r.report.ssim, 4) << " |\n";
  }
  for (const auto& suite : suites) {
    std::vector<std::string> labels;
    for (const auto& r : runs) {
      for (const auto& row : r.report.rows) {
        if (row.suite == suite && std::find(labels.begin(), labels.end(), row.distortion) == labels.end()) {
          labels.push_back(row.distortion);
        }
      }
    }
    out << "\n## ACC (%) on " << suite << "\n\n| Strategy | Seed |";
    for (const auto& l : labels) out << ' ' << l << " |";
    out << " Avg. |\n|---|---:|";
    for (size_t i = 0; i <= labels.size(); ++i) out << "---:|";
    out << '\n';
    for (auto s : strategies) {
      std::vector<double> sums(labels.size(), 0.0);
      int n = 0;
      for (const auto& r : runs) {
        if (r.strategy != s) continue;
        ++n;
        out << "| " << training::strategy_name(s) << " | " << r.seed << " |";
        for (size_t i = 0; i < labels.size(); ++i) {
          double acc = std::numeric_limits<double>::quiet_NaN();
          for (const auto& row : r.report.rows)
            if (row.suite == suite && row.distortion == labels[i]) acc = row.acc_percent;
          sums[i] += acc;
          out << ' ' << eval::fmt(acc, 2) << " |";
        }
        out << ' ' << eval::fmt(r.report.suite_mean(suite), 2) << " |\n";
      }
      if (n > 1) {
        double total = 0.0;
        out << "| " << training::strategy_name(s) << " | mean |";
        for (double v : sums) {
          out << ' ' << eval::fmt(v / n, 2) << " |";
          total += v / n;
        }
        out << ' ' << eval::fmt(total / static_cast<double>(labels.size()), 2) << " |\n";
      }
    }
  }
  return out.str();
}

eval::EvalReport evaluate_params(const ExperimentConfig& config, const model::ParamSet& params, double embed_strength,
                                 const data::DatasetHandle& dataset) {
  model::ModelConfig mc = config.model;
  mc.embed_strength = embed_strength;
  const model::ConvModel net(mc);
  const auto test = dataset.with_split(data::Split::Test);
  eval::EvalOptions opt;
  opt.message_seed = derive_seed(config.eval.seed, "msg");
  opt.distortion_seed = config.eval.seed;
  opt.max_images = config.eval.max_images;
  eval::EvalReport report;
  bool first = true;
  for (auto suite : config.eval.suites) {
    const auto r = eval::evaluate_suite(net, params, test, eval::build_suite(suite, config.eval.scale), eval::suite_name(suite), opt);
    if (first) {
      report = r;
      first = false;
    } else {
      report.append(r);
    }
  }
  report.config_hash = hash_of(config);
  report.seed = config.eval.seed;
  return report;
}

double test_psnr(const ExperimentConfig& config, const model::ParamSet& params, double embed_strength,
                 const data::DatasetHandle& dataset) {
  model::ModelConfig mc = config.model;
  mc.embed_strength = embed_strength;
  const model::ConvModel net(mc);
  eval::EvalOptions opt;
  opt.message_seed = derive_seed(config.eval.seed, "msg");
  opt.max_images = config.eval.max_images;
  return eval::evaluate_suite(net, params, dataset.with_split(data::Split::Test), {noise::DistortionSpec::identity()}, "psnr", opt)
      .psnr_db;
}

Bisection match_psnr(const ExperimentConfig& config, const model::ParamSet& params, double start_strength, double target,
                     const data::DatasetHandle& dataset) {
  const double tol = config.compare.psnr_tolerance;
  Bisection best;
  best.strength = start_strength;
  best.psnr = test_psnr(config, params, start_strength, dataset);
  if (std::abs(best.psnr - target) <= tol) {
    best.converged = true;
    return best;
  }
  // PSNR falls as the strength grows: bracket, then bisect.
  int it = 0;
  auto consider = [&](double strength) {
    ++it;
    const double p = test_psnr(config, params, strength, dataset);
    if (std::abs(p - target) < std::abs(best.psnr - target)) {
      best.strength = strength;
      best.psnr = p;
    }
    best.converged = std::abs(best.psnr - target) <= tol;
    return p;
  };
  double lo = 0.0, hi = start_strength;
  if (best.psnr > target) {
    lo = start_strength;
    hi = 2.0 * start_strength;
    while (it < config.compare.max_iterations && !best.converged && consider(hi) > target) {
      lo = hi;
      hi *= 2.0;
    }
  }
  while (it < config.compare.max_iterations && !best.converged) {
    const double mid = 0.5 * (lo + hi);
    if (consider(mid) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  best.iterations = it;
  return best;
}

std::vector<RunRecord> train_and_evaluate(const ExperimentConfig& config, Strategy strategy, std::ostream& log) {
  const auto dataset = open_dataset(config);
  const auto pool = make_pool(config);
  const model::ConvModel net(config.model);
  write_file(config.output_dir / "split_manifest.json", dataset.split_manifest().dump(2) + "\n");
  std::vector<RunRecord> runs;
  for (uint64_t seed : config.seeds) {
    training::TrainConfig tc = config.train;
    tc.strategy = strategy;
    tc.seed = seed;
    RunRecord rec;
    rec.strategy = strategy;
    rec.seed = seed;
    rec.dir = config.output_dir / run_dir_name(strategy) / ("seed" + std::to_string(seed));
    log << "[" << training::strategy_name(strategy) << " seed " << seed << "] training " << tc.total_steps << " steps -> "
        << rec.dir.string() << std::endl;
    const int64_t every = std::max<int64_t>(1, tc.total_steps / 10);
    const auto result = training::train(tc, net, dataset, pool, rec.dir, [&](const training::StepResult& s) {
      if ((s.step_index + 1) % every == 0) {
        log << "  step " << s.step_index + 1 << " total " << eval::fmt(s.breakdown.total, 5) << std::endl;
      }
    });
    for (const auto& v : result.validation) {
      log << "  val step " << v.step << " mean ACC " << eval::fmt(v.mean_acc, 2) << " PSNR " << eval::fmt(v.psnr_db, 2) << std::endl;
    }
    rec.params = result.best.params;
    rec.embed_strength = config.model.embed_strength;
    rec.train_seconds = result.seconds;
    rec.report = evaluate_params(config, rec.params, rec.embed_strength, dataset);
    runs.push_back(std::move(rec));
  }
  return runs;
}

namespace {

void write_plots(const fs::path& dir, std::ostream& log) {
  // loss curves from every losses.csv under dir
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
  std::vector<fs::path> files;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().filename() == "losses.csv") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto rows = parse_csv(read_file(f));
    if (rows.size() < 2) continue;
    const auto& header = rows[0];
    const auto col = std::find(header.begin(), header.end(), "total") - header.begin();
    if (col >= static_cast<long>(header.size())) continue;
    // window means keep at most ~200 points per curve
    const size_t n = rows.size() - 1;
    const size_t window = std::max<size_t>(1, n / 200);
    std::vector<std::pair<double, double>> pts;
    for (size_t i = 0; i + window <= n; i += window) {
      double sx = 0, sy = 0;
      for (size_t j = 0; j < window; ++j) {
        sx += std::stod(rows[1 + i + j][0]);
        sy += std::stod(rows[1 + i + j][static_cast<size_t>(col)]);
      }
      pts.emplace_back(sx / window, sy / window);
    }
    series.emplace_back(fs::relative(f.parent_path(), dir).string(), std::move(pts));
  }
  if (!series.empty()) {
    write_file(dir / "loss_curves.svg", loss_curve_svg(series, "Total training loss"));
    log << "wrote " << (dir / "loss_curves.svg").string() << std::endl;
  }

  const fs::path report = dir / "report.csv";
  if (!fs::exists(report)) return;
  const auto rows = parse_csv(read_file(report));
  if (rows.size() < 2) return;
  std::vector<std::string> groups, bars;
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() < 5) continue;
    const std::string& strategy = rows[i][0];
    const std::string& suite = rows[i][2];
    if (std::find(groups.begin(), groups.end(), suite) == groups.end()) groups.push_back(suite);
    if (std::find(bars.begin(), bars.end(), strategy) == bars.end()) bars.push_back(strategy);
    auto& cell = acc[{suite, strategy}];
    cell.first += std::stod(rows[i][4]);
    cell.second += 1;
  }
  std::vector<std::vector<double>> values;
  for (const auto& g : groups) {
    std::vector<double> row;
    for (const auto& b : bars) {
      const auto it = acc.find({g, b});
      row.push_back(it == acc.end() ? 0.0 : it->second.first / it->second.second);
    }
    values.push_back(row);
  }
  write_file(dir / "acc_bars.svg", bar_chart_svg(groups, bars, values, "Mean ACC (%) per suite"));
  log << "wrote " << (dir / "acc_bars.svg").string() << std::endl;
}

}  // namespace

int run_experiment(const ExperimentConfig& config, std::ostream& log) {
  fs::create_directories(config.output_dir);
  write_file(config.output_dir / "config.resolved", config.resolved());
  const auto runs = train_and_evaluate(config, config.train.strategy, log);
  write_standard_outputs(config, runs, std::string("Experiment: ") + training::strategy_name(config.train.strategy));
  write_plots(config.output_dir, log);
  log << "wrote " << (config.output_dir / "report.csv").string() << std::endl;
  return 0;
}

int run_eval(const ExperimentConfig& config, const fs::path& checkpoint, std::optional<double> embed_strength,
             std::ostream& log) {
  const auto ck = model::load_checkpoint(checkpoint);
  ExperimentConfig c = config;
  c.model = model::ModelConfig::from_json(ck.model);
  fs::create_directories(c.output_dir);
  write_file(c.output_dir / "config.resolved", c.resolved());
  RunRecord rec;
  rec.strategy = training::parse_strategy(ck.meta.value("strategy", std::string("MetaFC")));
  rec.seed = ck.meta.value("seed", uint64_t{0});
  rec.params = ck.params;
  rec.embed_strength = embed_strength.value_or(c.model.embed_strength);
  rec.report = evaluate_params(c, rec.params, rec.embed_strength, open_dataset(c));
  write_standard_outputs(c, {rec}, "Evaluation of " + checkpoint.filename().string());
  write_plots(c.output_dir, log);
  log << "wrote " << (c.output_dir / "report.csv").string() << std::endl;
  return 0;
}

int run_compare(const ExperimentConfig& config, std::ostream& log) {
  fs::create_directories(config.output_dir);
  write_file(config.output_dir / "config.resolved", config.resolved());
  auto srd = train_and_evaluate(config, Strategy::SRD, log);
  auto mfc = train_and_evaluate(config, Strategy::MetaFC, log);
  const auto dataset = open_dataset(config);

  std::ostringstream matching;
  matching << "seed,srd_strength,srd_psnr,metafc_strength,metafc_psnr,iterations,converged\n";
  bool all_converged = true;
  for (size_t i = 0; i < srd.size(); ++i) {
    double target = config.compare.target_psnr;
    Bisection s{srd[i].embed_strength, test_psnr(config, srd[i].params, srd[i].embed_strength, dataset), 0, true};
    if (target > 0) s = match_psnr(config, srd[i].params, srd[i].embed_strength, target, dataset);
    if (target <= 0) target = s.psnr;
    const Bisection m = match_psnr(config, mfc[i].params, mfc[i].embed_strength, target, dataset);
    all_converged = all_converged && s.converged && m.converged;
    log << "[seed " << srd[i].seed << "] PSNR match: SRD " << eval::fmt(s.psnr, 2) << " dB at " << shortest(s.strength)
        << ", Meta-FC " << eval::fmt(m.psnr, 2) << " dB at " << shortest(m.strength) << (m.converged ? "" : " (not converged)")
        << std::endl;
    matching << srd[i].seed << ',' << shortest(s.strength) << ',' << eval::fmt(s.psnr, 4) << ',' << shortest(m.strength) << ','
             << eval::fmt(m.psnr, 4) << ',' << s.iterations + m.iterations << ',' << (s.converged && m.converged ? 1 : 0)
             << '\n';
    if (s.strength != srd[i].embed_strength) {
      srd[i].embed_strength = s.strength;
      srd[i].report = evaluate_params(config, srd[i].params, s.strength, dataset);
    }
    if (m.strength != mfc[i].embed_strength) {
      mfc[i].embed_strength = m.strength;
      mfc[i].report = evaluate_params(config, mfc[i].params, m.strength, dataset);
    }
  }
  write_file(config.output_dir / "psnr_matching.csv", matching.str());

  std::vector<RunRecord> all = srd;
  all.insert(all.end(), mfc.begin(), mfc.end());

  // side-by-side table: per seed and the cross-seed mean
  std::ostringstream cmp, md;
  cmp << "suite,distortion,seed,srd_acc,metafc_acc,delta\n";
  md << "\n## SRD vs Meta-FC (PSNR matched" << (all_converged ? "" : ", WARNING: bisection did not converge for every seed")
     << ")\n\n| Suite | Distortion | SRD | Meta-FC | Delta |\n|---|---|---:|---:|---:|\n";
  const auto& rows = srd.front().report.rows;
  std::map<std::string, std::pair<double, int>> suite_delta;
  for (size_t r = 0; r < rows.size(); ++r) {
    double ms = 0, mm = 0;
    for (size_t i = 0; i < srd.size(); ++i) {
      const double a = srd[i].report.rows[r].acc_percent, b = mfc[i].report.rows[r].acc_percent;
      cmp << csv_field(rows[r].suite) << ',' << csv_field(rows[r].distortion) << ',' << srd[i].seed << ',' << eval::fmt(a, 4)
          << ',' << eval::fmt(b, 4) << ',' << eval::fmt(b - a, 4) << '\n';
      ms += a;
      mm += b;
    }
    ms /= static_cast<double>(srd.size());
    mm /= static_cast<double>(srd.size());
    cmp << csv_field(rows[r].suite) << ',' << csv_field(rows[r].distortion) << ",mean," << eval::fmt(ms, 4) << ','
        << eval::fmt(mm, 4) << ',' << eval::fmt(mm - ms, 4) << '\n';
    md << "| " << rows[r].suite << " | " << rows[r].distortion << " | " << eval::fmt(ms, 2) << " | " << eval::fmt(mm, 2) << " | "
       << eval::fmt(mm - ms, 2) << " |\n";
    suite_delta[rows[r].suite].first += mm - ms;
    suite_delta[rows[r].suite].second += 1;
  }
  md << "\n| Suite | Mean delta (Meta-FC - SRD) |\n|---|---:|\n";
  for (const auto& [suite, d] : suite_delta) md << "| " << suite << " | " << eval::fmt(d.first / d.second, 2) << " |\n";
  write_file(config.output_dir / "comparison.csv", cmp.str());
  write_file(config.output_dir / "report.csv", runs_csv(all));
  write_file(config.output_dir / "report.md", runs_markdown(all, "SRD vs Meta-FC") + md.str());

  double ts = 0, tm = 0;
  for (const auto& r : srd) ts += r.train_seconds;
  for (const auto& r : mfc) tm += r.train_seconds;
  const nlohmann::json timing = {{"srd_seconds", ts}, {"metafc_seconds", tm}, {"metafc_over_srd", ts > 0 ? tm / ts : 0.0}};
  write_file(config.output_dir / "timing.json", timing.dump(2) + "\n");
  log << "wall-clock ratio Meta-FC/SRD: " << eval::fmt(ts > 0 ? tm / ts : 0.0, 2) << std::endl;
  write_plots(config.output_dir, log);
  return 0;
}

int run_ablate(const ExperimentConfig& config, std::ostream& log) {
  fs::create_directories(config.output_dir);
  write_file(config.output_dir / "config.resolved", config.resolved());
  const std::pair<Strategy, const char*> variants[] = {
      {Strategy::MetaTestOnly, "w/o meta-train & FC"},
      {Strategy::MetaTrainOnly, "w/o meta-test & FC"},
      {Strategy::MetaFC_noFC, "w/o FC"},
      {Strategy::MetaFC, "Meta-FC"},
  };
  std::vector<RunRecord> all;
  std::ostringstream csv, md;
  csv << "variant,strategy";
  md << "\n## Ablation (mean ACC % over seeds)\n\n| Variant |";
  for (auto s : config.eval.suites) {
    csv << ',' << eval::suite_name(s);
    md << ' ' << eval::suite_name(s) << " |";
  }
  csv << '\n';
  md << "\n|---|";
  for (size_t i = 0; i < config.eval.suites.size(); ++i) md << "---:|";
  md << '\n';
  for (const auto& [strategy, label] : variants) {
    const auto runs = train_and_evaluate(config, strategy, log);
    csv << csv_field(label) << ',' << training::strategy_name(strategy);
    md << "| " << label << " |";
    for (auto s : config.eval.suites) {
      double sum = 0;
      for (const auto& r : runs) sum += r.report.suite_mean(eval::suite_name(s));
      const double mean = sum / static_cast<double>(runs.size());
      csv << ',' << eval::fmt(mean, 4);
      md << ' ' << eval::fmt(mean, 2) << " |";
    }
    csv << '\n';
    md << '\n';
    all.insert(all.end(), runs.begin(), runs.end());
  }
  write_file(config.output_dir / "ablation.csv", csv.str());
  write_file(config.output_dir / "report.csv", runs_csv(all));
  write_file(config.output_dir / "report.md", runs_markdown(all, "Ablation") + md.str());
  write_plots(config.output_dir, log);
  return 0;
}

int run_report(const fs::path& dir, std::ostream& log) {
  if (!fs::is_directory(dir)) throw std::runtime_error("report: '" + dir.string() + "' is not a directory");
  write_plots(dir, log);
  return 0;
}

std::string loss_curve_svg(const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series,
                           const std::string& title) {
  const double W = 720, H = 420, left = 70, right = 200, top = 40, bottom = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& [name, pts] : series) {
    for (const auto& [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!(x1 > x0)) x1 = x0 + 1;
  if (!(y1 > y0)) y1 = y0 + 1;
  y0 = std::min(0.0, y0);
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape_xml(title) << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << eval::fmt(yv, 3) << "</text>\n";
    s << "<text x=\"" << px(xv) << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\">" << eval::fmt(xv, 0) << "</text>\n";
  }
  s << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">step</text>\n";
  for (size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[i].second) s << eval::fmt(px(x), 1) << ',' << eval::fmt(py(y), 1) << ' ';
    s << "\"/>\n";
    const double ly = top + 16 * static_cast<double>(i);
    s << "<rect x=\"" << W - right + 12 << "\" y=\"" << ly << "\" width=\"12\" height=\"3\" fill=\"" << color << "\"/>\n";
    s << "<text x=\"" << W - right + 30 << "\" y=\"" << ly + 5 << "\">" << escape_xml(series[i].first) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string bar_chart_svg(const std::vector<std::string>& groups, const std::vector<std::string>& bars,
                          const std::vector<std::vector<double>>& values, const std::string& title) {
  const double W = 720, H = 420, left = 60, right = 160, top = 40, bottom = 50;
  const double plot_w = W - left - right, plot_h = H - top - bottom;
  const double group_w = plot_w / std::max<size_t>(1, groups.size());
  const double bar_w = group_w * 0.8 / std::max<size_t>(1, bars.size());
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape_xml(title) << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = 20.0 * i, y = H - bottom - v / 100.0 * plot_h;
    s << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << W - right << "\" y2=\"" << y << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g) + group_w * 0.1;
    for (size_t b = 0; b < bars.size(); ++b) {
      const double v = std::clamp(values[g][b], 0.0, 100.0);
      const double h = v / 100.0 * plot_h;
      s << "<rect x=\"" << eval::fmt(gx + bar_w * static_cast<double>(b), 1) << "\" y=\"" << eval::fmt(H - bottom - h, 1)
        << "\" width=\"" << eval::fmt(bar_w * 0.95, 1) << "\" height=\"" << eval::fmt(h, 1) << "\" fill=\""
        << kPalette[b % std::size(kPalette)] << "\"><title>" << escape_xml(bars[b]) << ": " << eval::fmt(values[g][b], 2)
        << "</title></rect>\n";
    }
    s << "<text x=\"" << gx + group_w * 0.4 << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\">"
      << escape_xml(groups[g]) << "</text>\n";
  }
  for (size_t b = 0; b < bars.size(); ++b) {
    const double ly = top + 16 * static_cast<double>(b);
    s << "<rect x=\"" << W - right + 12 << "\" y=\"" << ly << "\" width=\"12\" height=\"10\" fill=\"" << kPalette[b % std::size(kPalette)]
      << "\"/>\n";
    s << "<text x=\"" << W - right + 30 << "\" y=\"" << ly + 9 << "\">" << escape_xml(bars[b]) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace metafc::cli
