#pragma once

#include "handkd/camera.hpp"
#include "handkd/tensor.hpp"

namespace handkd {

enum class AnnotationMode : uint8_t { kFull3d = 0, kOnly2d = 1 };

enum class KDMode { kNone, kOutput, kFeature, kCombined };

const char* kd_mode_name(KDMode mode);
KDMode kd_mode_from_name(const std::string& name);  // throws on unknown name

/// Everything a network head predicts for one sample.
struct Prediction {
  Tensor k3d;    // {21, 3} mm
  Tensor k2d;    // {21, 2} px
  Tensor theta;  // {48}
  Tensor beta;   // {10}
  CameraParams pi;
};

/// Training annotation for one sample. 2D keypoints are always present;
/// 3D keypoints and model parameters only for fully annotated samples.
struct GroundTruth {
  Tensor k3d;          // {21, 3}, defined iff mode == kFull3d
  Tensor k2d;          // {21, 2}, required
  Tensor mano_params;  // {58} = theta‖beta, defined iff mode == kFull3d
  AnnotationMode mode = AnnotationMode::kFull3d;
};

struct GtWeights {
  double w_2d = 1.0;
  double w_3d = 1.0;
  double w_mano = 1.0;
};

/// Distillation configuration: mode, loss weights, and — for the feature
/// modes — the learnable 1×1 projection mapping teacher channels onto
/// student channels.
struct KDConfig {
  KDMode mode = KDMode::kNone;
  double lambda_kd = 0.0;
  double gamma_fd = 0.0;
  Tensor phi_weights;  // {C_S, C_T}; defined iff mode uses features
  Tensor phi_bias;     // {C_S}
};

/// Supervised loss: mean squared 2D reprojection error per keypoint, plus —
/// for fully annotated samples — mean squared 3D keypoint error per keypoint
/// and mean squared parameter error per scalar. For 2D-only samples the 3D
/// terms are never built, so their gradients are exactly zero.
Tensor loss_gt(const Prediction& pred, const GroundTruth& gt,
               const GtWeights& weights = {});

/// Output-level distillation: student-vs-teacher mean squared differences
/// of 3D keypoints, 2D keypoints, and the 58 concatenated model parameters.
/// The teacher side is detached; no gradient reaches it.
Tensor loss_kd_out(const Prediction& student, const Prediction& teacher);

/// Feature-level distillation: project the (detached) teacher map through
/// the 1×1 convolution, bilinearly resize to the student's spatial extent
/// if it differs, and take the mean squared difference.
Tensor loss_kd_feat(const Tensor& student_feat, const Tensor& teacher_feat,
                    const Tensor& phi_weights, const Tensor& phi_bias);

/// Total objective per mode:
///   kNone     → L_GT
///   kOutput   → L_GT + λ·L_KD,out
///   kFeature  → L_GT + λ·(γ·L_KD,feat)
///   kCombined → L_GT + λ·(L_KD,out + γ·L_KD,feat)
/// Teacher arguments may be null only when the mode does not need them.
Tensor total_loss(const KDConfig& cfg, const Prediction& student,
                  const Prediction* teacher, const Tensor* student_feat,
                  const Tensor* teacher_feat, const GroundTruth& gt,
                  const GtWeights& weights = {});

}  // namespace handkd
