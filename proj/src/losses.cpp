#include "handkd/losses.hpp"

#include <stdexcept>

namespace handkd {

namespace {

constexpr int kKeypoints = 21;
constexpr int kParams = 58;  // 48 pose + 10 shape

Tensor mean_sq(const Tensor& a, const Tensor& b, double count) {
  return mul(sq_l2(a, b), 1.0 / count);
}

Tensor concat_params(const Tensor& theta, const Tensor& beta) {
  return concat({theta, beta});
}

}  // namespace

const char* kd_mode_name(KDMode mode) {
  switch (mode) {
    case KDMode::kNone: return "none";
    case KDMode::kOutput: return "output";
    case KDMode::kFeature: return "feature";
    case KDMode::kCombined: return "combined";
  }
  return "?";
}

KDMode kd_mode_from_name(const std::string& name) {
  if (name == "none") return KDMode::kNone;
  if (name == "output") return KDMode::kOutput;
  if (name == "feature") return KDMode::kFeature;
  if (name == "combined") return KDMode::kCombined;
  throw std::invalid_argument("unknown distillation mode '" + name +
                              "' (expected none|output|feature|combined)");
}

Tensor loss_gt(const Prediction& pred, const GroundTruth& gt,
               const GtWeights& weights) {
  if (!gt.k2d.defined())
    throw std::invalid_argument("loss_gt: ground truth lacks 2D keypoints");
  Tensor loss = mul(mean_sq(pred.k2d, gt.k2d, kKeypoints), weights.w_2d);
  if (gt.mode == AnnotationMode::kFull3d) {
    if (!gt.k3d.defined() || !gt.mano_params.defined())
      throw std::invalid_argument(
          "loss_gt: fully annotated sample lacks 3D fields");
    loss = add(loss, mul(mean_sq(pred.k3d, gt.k3d, kKeypoints), weights.w_3d));
    loss = add(loss, mul(mean_sq(concat_params(pred.theta, pred.beta),
                                 gt.mano_params, kParams),
                         weights.w_mano));
  }
  return loss;
}

Tensor loss_kd_out(const Prediction& student, const Prediction& teacher) {
  Tensor l = mean_sq(student.k3d, teacher.k3d.detach(), kKeypoints);
  l = add(l, mean_sq(student.k2d, teacher.k2d.detach(), kKeypoints));
  l = add(l, mean_sq(concat_params(student.theta, student.beta),
                     concat_params(teacher.theta, teacher.beta).detach(),
                     kParams));
  return l;
}

Tensor loss_kd_feat(const Tensor& student_feat, const Tensor& teacher_feat,
                    const Tensor& phi_weights, const Tensor& phi_bias) {
  if (student_feat.ndim() != 3 || teacher_feat.ndim() != 3)
    throw std::invalid_argument("loss_kd_feat: feature maps must be C×H×W");
  if (phi_weights.ndim() != 2 ||
      phi_weights.extent(0) != student_feat.extent(0) ||
      phi_weights.extent(1) != teacher_feat.extent(0))
    throw std::invalid_argument(
        "loss_kd_feat: projection must map " +
        std::to_string(teacher_feat.extent(0)) + " teacher channels to " +
        std::to_string(student_feat.extent(0)) + " student channels, got " +
        shape_str(phi_weights.shape()));
  Tensor projected =
      conv_1x1(teacher_feat.detach(), phi_weights, phi_bias);
  if (projected.extent(1) != student_feat.extent(1) ||
      projected.extent(2) != student_feat.extent(2))
    projected = bilinear_resize(projected, student_feat.extent(1),
                                student_feat.extent(2));
  return mean_sq(student_feat, projected, student_feat.numel());
}

Tensor total_loss(const KDConfig& cfg, const Prediction& student,
                  const Prediction* teacher, const Tensor* student_feat,
                  const Tensor* teacher_feat, const GroundTruth& gt,
                  const GtWeights& weights) {
  Tensor gt_term = loss_gt(student, gt, weights);
  const bool needs_out =
      cfg.mode == KDMode::kOutput || cfg.mode == KDMode::kCombined;
  const bool needs_feat =
      cfg.mode == KDMode::kFeature || cfg.mode == KDMode::kCombined;
  if (needs_out && teacher == nullptr)
    throw std::invalid_argument("total_loss: mode needs teacher predictions");
  if (needs_feat) {
    if (student_feat == nullptr || teacher_feat == nullptr)
      throw std::invalid_argument("total_loss: mode needs feature maps");
    if (!cfg.phi_weights.defined() || !cfg.phi_bias.defined())
      throw std::invalid_argument(
          "total_loss: mode needs the feature projection");
  }
  switch (cfg.mode) {
    case KDMode::kNone:
      return gt_term;
    case KDMode::kOutput:
      return add(gt_term, mul(loss_kd_out(student, *teacher), cfg.lambda_kd));
    case KDMode::kFeature:
      return add(gt_term,
                 mul(loss_kd_feat(*student_feat, *teacher_feat,
                                  cfg.phi_weights, cfg.phi_bias),
                     cfg.lambda_kd * cfg.gamma_fd));
    case KDMode::kCombined:
      return add(gt_term,
                 mul(add(loss_kd_out(student, *teacher),
                         mul(loss_kd_feat(*student_feat, *teacher_feat,
                                          cfg.phi_weights, cfg.phi_bias),
                             cfg.gamma_fd)),
                     cfg.lambda_kd));
  }
  throw std::invalid_argument("total_loss: unknown mode");
}

}  // namespace handkd
