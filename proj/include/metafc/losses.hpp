#pragma once

// Scalar training objectives and the λ₁/λ₂ schedule.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metafc/autograd.hpp"

namespace metafc::losses {

struct LossWeights {
  double lambda_f = 0.001;
  double lambda1 = 5.0;
  double lambda2 = 1.0;
};

struct ScheduleState {
  int64_t step = 0;
  int64_t total_steps = 1;
  double warm_fraction = 0.5;
  // Endpoints: λ₁ falls from lambda1_start to lambda1_end while λ₂ rises.
  double lambda1_start = 5.0;
  double lambda1_end = 1.0;
  double lambda2_start = 1.0;
  double lambda2_end = 15.0;
};

// Which objective produced a breakdown; decides how `total` is rebuilt.
enum class Objective {
  MetaFC,          // λ₁(meta_train + msg_tes)/(m+1) + λ₂(img_tra + img_tes)/2
  SingleDistortion,  // one distorted batch logged as msg_tes with m = 0, img_tra = img_tes
  MetaTrainOnly,   // λ₁·msg_tra/m + λ₂·img_tra
};

const char* objective_name(Objective o);

struct LossBreakdown {
  double msg_tra = 0.0;
  double fc = 0.0;
  double meta_train = 0.0;
  double msg_tes = 0.0;
  double img_tra = 0.0;
  double img_tes = 0.0;
  double img = 0.0;
  double total = 0.0;
  LossWeights weights;
  int64_t m = 0;
  Objective objective = Objective::MetaFC;

  // `total` recomputed from the component fields.
  double expected_total() const;
  // meta_train, img and total agree with the components to `rel_tol`.
  bool consistent(double rel_tol = 1e-6) const;
  // Name of the first non-finite field, or empty.
  std::string first_non_finite() const;
};

// mean over B·L of (sigmoid(logit) - bit)^2.
ad::Var message_loss(const ad::Var& logits, const Tensor& bits);
double message_loss(const Tensor& logits, const Tensor& bits);

// mean squared per-pixel difference.
ad::Var image_loss(const ad::Var& cover, const ad::Var& watermarked);
double image_loss(const Tensor& cover, const Tensor& watermarked);

// Σ_i (1 - batch mean of cos(f_w[b], f_no_i[b])) with every row scaled to
// unit length (norm floored at 1e-8).
ad::Var feature_consistency(const ad::Var& f_w, const std::vector<ad::Var>& f_no);
double feature_consistency(const Tensor& f_w, const std::vector<Tensor>& f_no);

// msg_tra + λ_f·fc; rejects negative inputs.
double meta_train_loss(double msg_tra, double fc, double lambda_f);
ad::Var meta_train_loss(const ad::Var& msg_tra, const ad::Var& fc, double lambda_f);

inline double meta_test_loss(double msg_tes) { return msg_tes; }
inline ad::Var meta_test_loss(const ad::Var& msg_tes) { return msg_tes; }

// λ₁(meta_train + msg_tes)/(m+1) + λ₂(img_tra + img_tes)/2; rejects m < 1.
double total_loss(const LossBreakdown& b, int64_t m, double lambda1, double lambda2);
ad::Var total_loss(const ad::Var& meta_train, const ad::Var& meta_test, const ad::Var& img_tra, const ad::Var& img_tes,
                   int64_t m, double lambda1, double lambda2);

// Piecewise-linear: endpoints reached at warm_fraction·total_steps, flat after.
std::pair<double, double> schedule_lambdas(const ScheduleState& s);

}  // namespace metafc::losses
