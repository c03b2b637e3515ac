#include "metafc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace metafc::losses {

namespace {

using ad::Var;

constexpr double kNormFloor = 1e-8;

// Rows of f [B, D] scaled to unit length.
Var normalize_rows(const Var& f) {
  const int64_t d = f.shape()[1];
  Var sq = ad::matmul(ad::mul(f, f), ad::constant(Tensor({d, 1}, 1.0)));
  Var norm = ad::clamp(ad::sqrt(sq), kNormFloor, std::numeric_limits<double>::infinity());
  return ad::div(f, ad::broadcast_to(norm, f.shape()));
}

bool close(double a, double b, double rel_tol) {
  return std::abs(a - b) <= rel_tol * std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::MetaFC: return "metafc";
    case Objective::SingleDistortion: return "single";
    case Objective::MetaTrainOnly: return "meta_train_only";
  }
  return "?";
}

double LossBreakdown::expected_total() const {
  switch (objective) {
    case Objective::MetaTrainOnly:
      return weights.lambda1 * msg_tra / static_cast<double>(m) + weights.lambda2 * img_tra;
    case Objective::SingleDistortion:
    case Objective::MetaFC:
      return weights.lambda1 * (meta_train + msg_tes) / static_cast<double>(m + 1) +
             weights.lambda2 * (img_tra + img_tes) / 2.0;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

bool LossBreakdown::consistent(double rel_tol) const {
  return close(meta_train, msg_tra + weights.lambda_f * fc, rel_tol) && close(img, img_tra + img_tes, rel_tol) &&
         close(total, expected_total(), rel_tol);
}

std::string LossBreakdown::first_non_finite() const {
  const std::pair<const char*, double> fields[] = {{"msg_tra", msg_tra}, {"fc", fc},           {"meta_train", meta_train},
                                                   {"msg_tes", msg_tes}, {"img_tra", img_tra}, {"img_tes", img_tes},
                                                   {"img", img},         {"total", total}};
  for (const auto& [name, v] : fields)
    if (!std::isfinite(v)) return name;
  return {};
}

Var message_loss(const Var& logits, const Tensor& bits) {
  if (logits.shape() != bits.shape() || bits.rank() != 2) {
    throw std::invalid_argument("message_loss: logits " + shape_str(logits.shape()) + " vs target " + shape_str(bits.shape()));
  }
  Var diff = ad::sub(ad::sigmoid(logits), ad::constant(bits));
  return ad::mean(ad::mul(diff, diff));
}

double message_loss(const Tensor& logits, const Tensor& bits) {
  ad::GradModeGuard off(false);
  return message_loss(Var(logits), bits).value().item();
}

Var image_loss(const Var& cover, const Var& watermarked) {
  if (cover.shape() != watermarked.shape()) {
    throw std::invalid_argument("image_loss: cover " + shape_str(cover.shape()) + " vs watermarked " +
                                shape_str(watermarked.shape()));
  }
  Var diff = ad::sub(watermarked, cover);
  return ad::mean(ad::mul(diff, diff));
}

double image_loss(const Tensor& cover, const Tensor& watermarked) {
  ad::GradModeGuard off(false);
  return image_loss(Var(cover), Var(watermarked)).value().item();
}

Var feature_consistency(const Var& f_w, const std::vector<Var>& f_no) {
  if (f_no.empty()) throw std::invalid_argument("feature_consistency: needs m >= 1 distorted feature sets");
  if (f_w.shape().size() != 2) throw std::invalid_argument("feature_consistency: features must be [B, D], got " + shape_str(f_w.shape()));
  const Var anchor = normalize_rows(f_w);
  const int64_t d = f_w.shape()[1];
  Var total;
  for (const auto& f : f_no) {
    if (f.shape() != f_w.shape()) {
      throw std::invalid_argument("feature_consistency: distorted features " + shape_str(f.shape()) + " vs anchor " +
                                  shape_str(f_w.shape()));
    }
    Var cosine = ad::matmul(ad::mul(anchor, normalize_rows(f)), ad::constant(Tensor({d, 1}, 1.0)));
    Var term = ad::add_scalar(ad::neg(ad::mean(cosine)), 1.0);
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

double feature_consistency(const Tensor& f_w, const std::vector<Tensor>& f_no) {
  ad::GradModeGuard off(false);
  std::vector<Var> vars;
  for (const auto& f : f_no) vars.emplace_back(f);
  return feature_consistency(Var(f_w), vars).value().item();
}

double meta_train_loss(double msg_tra, double fc, double lambda_f) {
  if (msg_tra < 0) throw std::invalid_argument("meta_train_loss: msg_tra must be >= 0");
  if (fc < 0) throw std::invalid_argument("meta_train_loss: fc must be >= 0");
  if (lambda_f < 0) throw std::invalid_argument("meta_train_loss: lambda_f must be >= 0");
  return msg_tra + lambda_f * fc;
}

Var meta_train_loss(const Var& msg_tra, const Var& fc, double lambda_f) {
  if (lambda_f < 0) throw std::invalid_argument("meta_train_loss: lambda_f must be >= 0");
  if (!fc.defined() || lambda_f == 0.0) return msg_tra;
  return ad::add(msg_tra, ad::scale(fc, lambda_f));
}

double total_loss(const LossBreakdown& b, int64_t m, double lambda1, double lambda2) {
  if (m < 1) throw std::invalid_argument("total_loss: m must be >= 1, got " + std::to_string(m));
  return lambda1 * (b.meta_train + meta_test_loss(b.msg_tes)) / static_cast<double>(m + 1) +
         lambda2 * (b.img_tra + b.img_tes) / 2.0;
}

Var total_loss(const Var& meta_train, const Var& meta_test, const Var& img_tra, const Var& img_tes, int64_t m,
               double lambda1, double lambda2) {
  if (m < 1) throw std::invalid_argument("total_loss: m must be >= 1, got " + std::to_string(m));
  Var message = ad::scale(ad::add(meta_train, meta_test), lambda1 / static_cast<double>(m + 1));
  Var image = ad::scale(ad::add(img_tra, img_tes), lambda2 / 2.0);
  return ad::add(message, image);
}

std::pair<double, double> schedule_lambdas(const ScheduleState& s) {
  if (s.total_steps < 1) throw std::invalid_argument("schedule_lambdas: total_steps must be >= 1");
  if (s.step < 0 || s.step > s.total_steps) {
    throw std::invalid_argument("schedule_lambdas: step " + std::to_string(s.step) + " outside [0, " +
                                std::to_string(s.total_steps) + "]");
  }
  if (!(s.warm_fraction > 0.0 && s.warm_fraction <= 1.0)) {
    throw std::invalid_argument("schedule_lambdas: warm_fraction must be in (0, 1]");
  }
  const double warm = s.warm_fraction * static_cast<double>(s.total_steps);
  const double t = std::min(1.0, static_cast<double>(s.step) / warm);
  return {s.lambda1_start + (s.lambda1_end - s.lambda1_start) * t, s.lambda2_start + (s.lambda2_end - s.lambda2_start) * t};
}

}  // namespace metafc::losses
