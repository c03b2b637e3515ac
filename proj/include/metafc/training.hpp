#pragma once

// Training strategies: single random distortion (SRD), the full meta-learning
// step with feature consistency, and the ablation variants.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "metafc/data.hpp"
#include "metafc/losses.hpp"
#include "metafc/model.hpp"
#include "metafc/noisepool.hpp"

namespace metafc::training {

enum class Strategy { SRD, MetaFC, MetaTrainOnly, MetaTestOnly, MetaFC_noFC };

const char* strategy_name(Strategy s);
// Accepts the names above case-insensitively plus srd/metafc/meta_train_only/
// meta_test_only/metafc_nofc.
Strategy parse_strategy(std::string_view text);

struct TrainConfig {
  Strategy strategy = Strategy::MetaFC;
  double outer_lr = 1e-3;
  std::optional<double> inner_lr;  // unset: same as outer_lr
  int64_t batch_size = 16;
  int64_t total_steps = 4000;
  bool first_order = false;
  double lambda_f = 0.001;
  double warm_fraction = 0.5;
  uint64_t seed = 0;
  int64_t eval_every = 500;   // validation interval in steps; the last step is always evaluated
  int64_t val_images = 64;    // 0: the whole validation split

  double alpha() const { return inner_lr.value_or(outer_lr); }
  // Throws std::invalid_argument naming the field.
  void validate() const;
};

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over a ParamSet.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t t = 0;

  // Returns new leaf parameters; `grads` follow params.vars() order.
  model::ParamSet update(const model::ParamSet& params, const std::vector<Tensor>& grads, double lr);
  std::vector<model::NamedParam> to_named(const model::ParamSet& params) const;
  static AdamState from_named(const model::ParamSet& params, const std::vector<model::NamedParam>& named, int64_t t);
};

struct StepResult {
  losses::LossBreakdown breakdown;
  double grad_norm = 0.0;
  int64_t step_index = 0;
  bool built_temporary = false;
};

// A non-finite loss or gradient; term() names it.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& term, int64_t step);
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

// Differentiable objective of one step before the optimizer runs.
struct Objective {
  ad::Var total;
  losses::LossBreakdown breakdown;
  std::optional<model::ParamSet> temporary;  // theta' when the strategy builds one
};

struct LossWeightsNow {
  double lambda_f = 0.0;
  double lambda1 = 5.0;
  double lambda2 = 1.0;
};

// One spec drawn uniformly from the pool with Rng(derive_seed(seed, "srd")).
size_t srd_choice(const noise::NoisePool& pool, uint64_t seed);

// λ₁·message_loss + λ₂·image_loss on one distorted batch.
Objective srd_objective(const model::WatermarkModel& model, const model::ParamSet& params, const Tensor& cover,
                        const Tensor& bits, const noise::DistortionSpec& spec, const LossWeightsNow& w, uint64_t seed);

// Meta-train on task.meta_train with anchor features from the undistorted
// watermarked batch, inner step theta' = theta - alpha * grad(meta_train),
// meta-test with theta' on task.meta_test, image loss from both encoders.
// first_order treats the inner gradient as a constant. with_fc = false skips
// the feature-consistency term (fc logged as 0).
Objective metafc_objective(const model::WatermarkModel& model, const model::ParamSet& params, const Tensor& cover,
                           const Tensor& bits, const noise::TaskSplit& task, const LossWeightsNow& w, double alpha,
                           bool first_order, bool with_fc, uint64_t seed);

// Meta-train half only: λ₁·msg_tra/m + λ₂·img_tra, no temporary parameters.
Objective meta_train_only_objective(const model::WatermarkModel& model, const model::ParamSet& params, const Tensor& cover,
                                    const Tensor& bits, const noise::TaskSplit& task, const LossWeightsNow& w,
                                    uint64_t seed);

struct StepInputs {
  const model::WatermarkModel& model;
  const model::ParamSet& params;
  AdamState& optimizer;
  const Tensor& cover;  // [B,C,H,W]
  const Tensor& bits;   // [B,L]
  const noise::NoisePool& pool;
  double lambda1;
  double lambda2;
  int64_t step_index;
  uint64_t seed;  // per-step seed
};

struct StepOutput {
  model::ParamSet params;
  StepResult result;
};

StepOutput srd_step(const StepInputs& in, const TrainConfig& config);
StepOutput metafc_step(const StepInputs& in, const TrainConfig& config);
StepOutput meta_train_only_step(const StepInputs& in, const TrainConfig& config);

using StrategyFn = std::function<StepOutput(const StepInputs&)>;

// SRD and MetaTestOnly -> srd_step; MetaFC -> metafc_step; MetaFC_noFC ->
// metafc_step with λ_f = 0; MetaTrainOnly -> meta_train_only_step.
StrategyFn make_strategy(const TrainConfig& config);

struct ValidationRow {
  int64_t step = 0;
  std::vector<std::string> labels;  // pool specs
  std::vector<double> acc;          // ACC per pool spec
  double mean_acc = 0.0;
  double psnr_db = 0.0;
};

struct TrainResult {
  model::Checkpoint best;  // highest mean validation ACC (earliest on ties)
  model::Checkpoint last;
  std::vector<StepResult> log;
  std::vector<ValidationRow> validation;
  double seconds = 0.0;
};

// Step seed for step k of a run.
uint64_t step_seed(uint64_t run_seed, int64_t step);

// CSV header and one row; the row format is fixed so reruns are byte-identical.
std::string losses_csv_header();
std::string losses_csv_row(const StepResult& r);

// Runs config.total_steps steps on the train split of `dataset`, validating on
// its val split. With a non-empty out_dir, writes losses.csv,
// val_metrics.csv, best.ckpt and last.ckpt there. On a non-finite loss the
// run stops, last.ckpt keeps the last good parameters and NonFiniteLoss is
// rethrown.
TrainResult train(const TrainConfig& config, const model::WatermarkModel& model, const data::DatasetHandle& dataset,
                  const noise::NoisePool& pool, const std::filesystem::path& out_dir = {},
                  const std::function<void(const StepResult&)>& on_step = {});

}  // namespace metafc::training
