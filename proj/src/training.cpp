#include "metafc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "metafc/evaluation.hpp"
#include "metafc/rng.hpp"

namespace metafc::training {

namespace {

using ad::Var;
using losses::LossBreakdown;
using model::ParamSet;

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

void bad_field(const std::string& field, const std::string& why) {
  throw std::invalid_argument("train config: '" + field + "' " + why);
}

double scalar(const Var& v) { return v.value().item(); }

uint64_t member_seed(uint64_t seed, std::string_view tag, uint64_t i) { return derive_seed(derive_seed(seed, tag), i); }

std::string g10(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
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

// Gradients of the objective, finiteness checks and the Adam update.
StepOutput finish_step(const StepInputs& in, Objective obj, double lr) {
  const std::string bad = obj.breakdown.first_non_finite();
  if (!bad.empty()) throw NonFiniteLoss(bad, in.step_index);
  const auto vars = in.params.vars();
  const auto grads = ad::grad(obj.total, vars);
  std::vector<Tensor> values;
  values.reserve(grads.size());
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.value().data()) sq += v * v;
    values.push_back(g.value());
  }
  if (!std::isfinite(sq)) throw NonFiniteLoss("gradient", in.step_index);
  StepOutput out{in.optimizer.update(in.params, values, lr), {}};
  out.result.breakdown = obj.breakdown;
  out.result.grad_norm = std::sqrt(sq);
  out.result.step_index = in.step_index;
  out.result.built_temporary = obj.temporary.has_value();
  return out;
}

noise::TaskSplit task_for(const StepInputs& in) { return noise::sample_task(in.pool, derive_seed(in.seed, "task")); }

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::SRD: return "SRD";
    case Strategy::MetaFC: return "MetaFC";
    case Strategy::MetaTrainOnly: return "MetaTrainOnly";
    case Strategy::MetaTestOnly: return "MetaTestOnly";
    case Strategy::MetaFC_noFC: return "MetaFC_noFC";
  }
  return "?";
}

Strategy parse_strategy(std::string_view text) {
  std::string t;
  for (char c : text) {
    if (c != '_' && c != '-') t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  if (t == "srd") return Strategy::SRD;
  if (t == "metafc") return Strategy::MetaFC;
  if (t == "metatrainonly") return Strategy::MetaTrainOnly;
  if (t == "metatestonly") return Strategy::MetaTestOnly;
  if (t == "metafcnofc") return Strategy::MetaFC_noFC;
  throw std::invalid_argument("unknown strategy '" + std::string(text) +
                              "' (expected SRD, MetaFC, MetaTrainOnly, MetaTestOnly or MetaFC_noFC)");
}

void TrainConfig::validate() const {
  if (!(outer_lr > 0.0) || !std::isfinite(outer_lr)) bad_field("outer_lr", "must be > 0");
  if (inner_lr && (!(*inner_lr >= 0.0) || !std::isfinite(*inner_lr))) bad_field("inner_lr", "must be >= 0");
  if (batch_size < 1) bad_field("batch_size", "must be >= 1");
  if (total_steps < 1) bad_field("total_steps", "must be >= 1");
  if (!(lambda_f >= 0.0)) bad_field("lambda_f", "must be >= 0");
  if (!(warm_fraction > 0.0 && warm_fraction <= 1.0)) bad_field("warm_fraction", "must be in (0, 1]");
  if (eval_every < 1) bad_field("eval_every", "must be >= 1");
  if (val_images < 0) bad_field("val_images", "must be >= 0");
}

ParamSet AdamState::update(const ParamSet& params, const std::vector<Tensor>& grads, double lr) {
  const auto vars = params.vars();
  if (grads.size() != vars.size()) {
    throw std::invalid_argument("adam: " + std::to_string(grads.size()) + " gradients for " + std::to_string(vars.size()) +
                                " tensors");
  }
  if (m.empty()) {
    for (const auto& v : vars) {
      m.emplace_back(v.shape());
      this->v.emplace_back(v.shape());
    }
  }
  ++t;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  std::vector<Var> next;
  next.reserve(vars.size());
  for (size_t i = 0; i < vars.size(); ++i) {
    Tensor value = vars[i].value();
    const Tensor& g = grads[i];
    double* mi = m[i].ptr();
    double* vi = v[i].ptr();
    double* p = value.ptr();
    for (int64_t k = 0; k < value.numel(); ++k) {
      mi[k] = kBeta1 * mi[k] + (1.0 - kBeta1) * g[k];
      vi[k] = kBeta2 * vi[k] + (1.0 - kBeta2) * g[k] * g[k];
      p[k] -= lr * (mi[k] / c1) / (std::sqrt(vi[k] / c2) + kEps);
    }
    next.emplace_back(std::move(value), true);
  }
  return params.with_vars(next);
}

std::vector<model::NamedParam> AdamState::to_named(const ParamSet& params) const {
  std::vector<model::NamedParam> out;
  const auto names = params.names();
  for (size_t i = 0; i < m.size(); ++i) {
    out.push_back({"adam.m." + names[i], Var(m[i])});
    out.push_back({"adam.v." + names[i], Var(v[i])});
  }
  return out;
}

AdamState AdamState::from_named(const ParamSet& params, const std::vector<model::NamedParam>& named, int64_t t) {
  AdamState s;
  s.t = t;
  if (named.empty()) return s;
  for (const auto& name : params.names()) {
    auto find = [&](const std::string& key) {
      for (const auto& np : named)
        if (np.name == key) return np.value.value();
      throw std::invalid_argument("optimizer state is missing '" + key + "'");
    };
    s.m.push_back(find("adam.m." + name));
    s.v.push_back(find("adam.v." + name));
  }
  return s;
}

NonFiniteLoss::NonFiniteLoss(const std::string& term, int64_t step)
    : std::runtime_error("non-finite " + term + " at step " + std::to_string(step)), term_(term) {}

size_t srd_choice(const noise::NoisePool& pool, uint64_t seed) {
  return static_cast<size_t>(Rng(derive_seed(seed, "srd")).below(pool.size()));
}

Objective srd_objective(const model::WatermarkModel& model, const ParamSet& params, const Tensor& cover,
                        const Tensor& bits, const noise::DistortionSpec& spec, const LossWeightsNow& w, uint64_t seed) {
  const Var cover_v(cover);
  const Var wm = model.encode(params, cover_v, bits);
  const Var distorted = noise::apply(spec, wm, cover, derive_seed(seed, "tes"));
  const Var msg = losses::message_loss(model.decode(params, distorted).logits, bits);
  const Var img = losses::image_loss(cover_v, wm);
  Objective out;
  out.total = ad::add(ad::scale(msg, w.lambda1), ad::scale(img, w.lambda2));
  LossBreakdown& b = out.breakdown;
  b.objective = losses::Objective::SingleDistortion;
  b.weights = {0.0, w.lambda1, w.lambda2};
  b.m = 0;
  b.msg_tes = scalar(msg);
  b.img_tra = b.img_tes = scalar(img);
  b.img = b.img_tra + b.img_tes;
  b.total = scalar(out.total);
  return out;
}

Objective metafc_objective(const model::WatermarkModel& model, const ParamSet& params, const Tensor& cover,
                           const Tensor& bits, const noise::TaskSplit& task, const LossWeightsNow& w, double alpha,
                           bool first_order, bool with_fc, uint64_t seed) {
  if (task.meta_train.empty()) throw std::invalid_argument("metafc: task has no meta-train distortions");
  const int64_t m = static_cast<int64_t>(task.meta_train.size());
  const double lambda_f = with_fc ? w.lambda_f : 0.0;
  const bool use_fc = with_fc && lambda_f > 0.0;
  const Var cover_v(cover);

  // meta-train at theta
  const Var wm = model.encode(params, cover_v, bits);
  Var anchor;
  if (use_fc) anchor = model.decode(params, wm).features;
  Var msg_tra;
  std::vector<Var> f_no;
  for (int64_t i = 0; i < m; ++i) {
    const Var distorted = noise::apply(task.meta_train[i], wm, cover, member_seed(seed, "tra", i));
    const auto out = model.decode(params, distorted);
    const Var l = losses::message_loss(out.logits, bits);
    msg_tra = msg_tra.defined() ? ad::add(msg_tra, l) : l;
    if (use_fc) f_no.push_back(out.features);
  }
  Var fc;
  if (use_fc) fc = losses::feature_consistency(anchor, f_no);
  const Var meta_train = losses::meta_train_loss(msg_tra, fc, lambda_f);

  // inner update
  const auto vars = params.vars();
  auto inner = ad::grad(meta_train, vars, !first_order);
  if (first_order) {
    for (auto& g : inner) g = g.detach();
  }
  ParamSet temporary = model::step_params(params, inner, alpha);

  // meta-test at theta'
  const Var wm_tes = model.encode(temporary, cover_v, bits);
  const Var distorted_tes = noise::apply(task.meta_test, wm_tes, cover, derive_seed(seed, "tes"));
  const Var msg_tes = losses::message_loss(model.decode(temporary, distorted_tes).logits, bits);

  const Var img_tra = losses::image_loss(cover_v, wm);
  const Var img_tes = losses::image_loss(cover_v, wm_tes);

  Objective out;
  out.total = losses::total_loss(meta_train, losses::meta_test_loss(msg_tes), img_tra, img_tes, m, w.lambda1, w.lambda2);
  LossBreakdown& b = out.breakdown;
  b.objective = losses::Objective::MetaFC;
  b.weights = {lambda_f, w.lambda1, w.lambda2};
  b.m = m;
  b.msg_tra = scalar(msg_tra);
  b.fc = use_fc ? scalar(fc) : 0.0;
  b.meta_train = scalar(meta_train);
  b.msg_tes = scalar(msg_tes);
  b.img_tra = scalar(img_tra);
  b.img_tes = scalar(img_tes);
  b.img = b.img_tra + b.img_tes;
  b.total = scalar(out.total);
  out.temporary = std::move(temporary);
  return out;
}

Objective meta_train_only_objective(const model::WatermarkModel& model, const ParamSet& params, const Tensor& cover,
                                    const Tensor& bits, const noise::TaskSplit& task, const LossWeightsNow& w,
                                    uint64_t seed) {
  if (task.meta_train.empty()) throw std::invalid_argument("meta_train_only: task has no meta-train distortions");
  const int64_t m = static_cast<int64_t>(task.meta_train.size());
  const Var cover_v(cover);
  const Var wm = model.encode(params, cover_v, bits);
  Var msg_tra;
  for (int64_t i = 0; i < m; ++i) {
    const Var distorted = noise::apply(task.meta_train[i], wm, cover, member_seed(seed, "tra", i));
    const Var l = losses::message_loss(model.decode(params, distorted).logits, bits);
    msg_tra = msg_tra.defined() ? ad::add(msg_tra, l) : l;
  }
  const Var img_tra = losses::image_loss(cover_v, wm);
  Objective out;
  out.total = ad::add(ad::scale(msg_tra, w.lambda1 / static_cast<double>(m)), ad::scale(img_tra, w.lambda2));
  LossBreakdown& b = out.breakdown;
  b.objective = losses::Objective::MetaTrainOnly;
  b.weights = {0.0, w.lambda1, w.lambda2};
  b.m = m;
  b.msg_tra = scalar(msg_tra);
  b.meta_train = b.msg_tra;
  b.img_tra = scalar(img_tra);
  b.img = b.img_tra;
  b.total = scalar(out.total);
  return out;
}

StepOutput srd_step(const StepInputs& in, const TrainConfig& config) {
  const auto& spec = in.pool.specs()[srd_choice(in.pool, in.seed)];
  return finish_step(in, srd_objective(in.model, in.params, in.cover, in.bits, spec, {0.0, in.lambda1, in.lambda2}, in.seed),
                     config.outer_lr);
}

StepOutput metafc_step(const StepInputs& in, const TrainConfig& config) {
  const bool with_fc = config.strategy != Strategy::MetaFC_noFC;
  const LossWeightsNow w{with_fc ? config.lambda_f : 0.0, in.lambda1, in.lambda2};
  return finish_step(in,
                     metafc_objective(in.model, in.params, in.cover, in.bits, task_for(in), w, config.alpha(),
                                      config.first_order, with_fc, in.seed),
                     config.outer_lr);
}

StepOutput meta_train_only_step(const StepInputs& in, const TrainConfig& config) {
  return finish_step(in,
                     meta_train_only_objective(in.model, in.params, in.cover, in.bits, task_for(in),
                                               {0.0, in.lambda1, in.lambda2}, in.seed),
                     config.outer_lr);
}

StrategyFn make_strategy(const TrainConfig& config) {
  config.validate();
  switch (config.strategy) {
    case Strategy::SRD:
    case Strategy::MetaTestOnly:
      return [config](const StepInputs& in) { return srd_step(in, config); };
    case Strategy::MetaFC:
    case Strategy::MetaFC_noFC:
      return [config](const StepInputs& in) { return metafc_step(in, config); };
    case Strategy::MetaTrainOnly:
      return [config](const StepInputs& in) { return meta_train_only_step(in, config); };
  }
  throw std::invalid_argument("make_strategy: unknown strategy");
}

uint64_t step_seed(uint64_t run_seed, int64_t step) { return member_seed(run_seed, "step", static_cast<uint64_t>(step)); }

std::string losses_csv_header() { return "step,lambda1,lambda2,msg_tra,fc,meta_train,msg_tes,img_tra,img_tes,total\n"; }

std::string losses_csv_row(const StepResult& r) {
  const auto& b = r.breakdown;
  std::string row = std::to_string(r.step_index);
  for (double v : {b.weights.lambda1, b.weights.lambda2, b.msg_tra, b.fc, b.meta_train, b.msg_tes, b.img_tra, b.img_tes,
                   b.total}) {
    row += ',' + g10(v);
  }
  return row + '\n';
}

TrainResult train(const TrainConfig& config, const model::WatermarkModel& model, const data::DatasetHandle& dataset,
                  const noise::NoisePool& pool, const std::filesystem::path& out_dir,
                  const std::function<void(const StepResult&)>& on_step) {
  config.validate();
  const auto train_split = dataset.with_split(data::Split::Train);
  const auto val_split = dataset.with_split(data::Split::Val);
  if (train_split.size() < config.batch_size) {
    throw std::invalid_argument("train: " + std::to_string(train_split.size()) + " training images for batch size " +
                                std::to_string(config.batch_size));
  }
  if (val_split.size() < 1) throw std::invalid_argument("train: validation split is empty");
  const Shape want = model.image_shape();
  if (train_split.channels() != want[0] || train_split.image_size().height != want[1] ||
      train_split.image_size().width != want[2]) {
    throw std::invalid_argument("train: dataset images do not match the model's " + shape_str(want));
  }
  const StrategyFn step_fn = make_strategy(config);

  std::ofstream losses_out, val_out;
  auto open = [&](std::ofstream& f, const char* name) {
    const auto path = out_dir / name;
    f.open(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
  };
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    open(losses_out, "losses.csv");
    open(val_out, "val_metrics.csv");
    losses_out << losses_csv_header();
    val_out << "step";
    for (const auto& s : pool.specs()) val_out << ',' << csv_field(s.label());
    val_out << ",mean_acc,psnr_db\n";
  }

  TrainResult result;
  ParamSet params = model.init(derive_seed(config.seed, "init")).as_leaves();
  AdamState optimizer;
  const int64_t per_epoch = train_split.size() / config.batch_size;
  std::optional<data::BatchStream> stream;
  int64_t stream_epoch = -1;
  double best_mean = -1.0;

  auto snapshot = [&](int64_t steps_done, double mean_acc) {
    model::Checkpoint ck;
    ck.model = model.describe();
    ck.params = params.detached();
    ck.optimizer = optimizer.to_named(params);
    ck.step = steps_done;
    ck.meta = {{"strategy", strategy_name(config.strategy)},
               {"seed", config.seed},
               {"adam_t", optimizer.t},
               {"mean_val_acc", mean_acc}};
    return ck;
  };
  auto save = [&](const model::Checkpoint& ck, const char* name) {
    if (!out_dir.empty()) model::save_checkpoint(out_dir / name, ck);
  };

  const auto t0 = std::chrono::steady_clock::now();
  double last_mean = std::numeric_limits<double>::quiet_NaN();
  for (int64_t k = 0; k < config.total_steps; ++k) {
    const int64_t epoch = k / per_epoch;
    if (epoch != stream_epoch) {
      stream.emplace(data::batches(train_split, config.batch_size, member_seed(config.seed, "epoch", epoch)));
      stream_epoch = epoch;
    }
    const uint64_t seed = step_seed(config.seed, k);
    const auto cover = (*stream)[k % per_epoch];
    const auto msg = data::sample_messages(config.batch_size, model.message_length(), derive_seed(seed, "msg"));
    losses::ScheduleState sched;
    sched.step = k;
    sched.total_steps = config.total_steps;
    sched.warm_fraction = config.warm_fraction;
    const auto [l1, l2] = losses::schedule_lambdas(sched);

    StepOutput out;
    try {
      out = step_fn(StepInputs{model, params, optimizer, cover.pixels, msg.bits, pool, l1, l2, k, seed});
    } catch (const NonFiniteLoss&) {
      result.last = snapshot(k, last_mean);
      save(result.last, "last.ckpt");
      throw;
    }
    params = std::move(out.params);
    result.log.push_back(out.result);
    if (losses_out.is_open()) losses_out << losses_csv_row(out.result);
    if (on_step) on_step(out.result);

    if ((k + 1) % config.eval_every == 0 || k + 1 == config.total_steps) {
      eval::EvalOptions opt;
      opt.message_seed = derive_seed(config.seed, "val.msg");
      opt.distortion_seed = derive_seed(config.seed, "val.noise");
      opt.max_images = config.val_images;
      const auto report = eval::evaluate_suite(model, params, val_split, pool.specs(), "val", opt);
      ValidationRow row;
      row.step = k + 1;
      for (const auto& r : report.rows) {
        row.labels.push_back(r.distortion);
        row.acc.push_back(r.acc_percent);
      }
      row.mean_acc = report.suite_mean("val");
      row.psnr_db = report.psnr_db;
      result.validation.push_back(row);
      last_mean = row.mean_acc;
      if (val_out.is_open()) {
        val_out << row.step;
        for (double a : row.acc) val_out << ',' << eval::fmt(a, 4);
        val_out << ',' << eval::fmt(row.mean_acc, 4) << ',' << eval::fmt(row.psnr_db, 4) << '\n';
        val_out.flush();
        losses_out.flush();
      }
      result.last = snapshot(k + 1, row.mean_acc);
      save(result.last, "last.ckpt");
      if (row.mean_acc > best_mean) {
        best_mean = row.mean_acc;
        result.best = result.last;
        save(result.best, "best.ckpt");
      }
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (losses_out.is_open()) {
    losses_out.close();
    if (!losses_out) throw std::runtime_error("write failed for " + (out_dir / "losses.csv").string());
  }
  return result;
}

}  // namespace metafc::training
