#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "handkd/data.hpp"
#include "handkd/nets.hpp"
#include "handkd/tensor.hpp"

namespace handkd {

/// Least-squares similarity q ≈ s·R·p + t between point clouds.
struct SimilarityTransform {
  double scale = 1.0;
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> translation{0, 0, 0};
};

/// Closed-form Umeyama fit: center both clouds, SVD the 3×3
/// cross-covariance with a determinant sign fix (proper rotation only),
/// scale from the variance ratio. Needs N ≥ 3 points (N×3 tensors) and a
/// non-degenerate source cloud; throws std::invalid_argument otherwise.
SimilarityTransform procrustes_align(const Tensor& p, const Tensor& q);

/// Applies s·R·p + t to every row of an N×3 cloud.
std::vector<double> apply_similarity(const SimilarityTransform& t,
                                     const Tensor& p);

/// Mean per-point Euclidean distance (mm) after Procrustes alignment.
/// pa_mpjpe is the joint flavor, pa_mpvpe the vertex flavor; they share
/// the same math and differ only in which cloud they are given.
double pa_mpjpe(const Tensor& pred, const Tensor& gt);
double pa_mpvpe(const Tensor& pred_verts, const Tensor& gt_verts);

/// Harmonic mean of precision (pred points within `threshold_mm` of some
/// gt point) and recall (vice versa), 0 when both are 0. Clouds are
/// Procrustes-aligned first unless `aligned` is false.
double f_score(const Tensor& pred_verts, const Tensor& gt_verts,
               double threshold_mm, bool aligned = true);

struct MetricsReport {
  double j_err = 0.0;  ///< mean PA-MPJPE, mm
  double v_err = 0.0;  ///< mean PA-MPVPE, mm
  std::map<double, double> f_at;  ///< threshold mm → mean F-score
  int n_samples = 0;
  long long params_total = 0;
  long long params_trainable = 0;
  double throughput = 0.0;  ///< forwards/second (0 until benched)
};

/// What evaluation needs from a prediction: the two point clouds.
struct PredictedShape {
  Tensor joints;    ///< {21, 3}
  Tensor vertices;  ///< {N_v, 3}
};
using Predictor = std::function<PredictedShape(const Sample&)>;

inline const std::vector<double> kDefaultThresholds{5.0, 15.0};

/// Runs the predictor on every sample and averages the per-sample
/// metrics against ground truth recomputed from true_params via the rig.
MetricsReport evaluate(const Predictor& predictor, const Dataset& ds,
                       const HandRig& rig,
                       const std::vector<double>& thresholds =
                           kDefaultThresholds);
/// Same, driving a trained model; also fills the parameter counts.
MetricsReport evaluate(const Model& model, const Dataset& ds,
                       const HandRig& rig,
                       const std::vector<double>& thresholds =
                           kDefaultThresholds);

/// Single-threaded wall-clock forwards/second on a fixed random input,
/// after `warmup` unmeasured forwards. iters ≥ 1.
struct BenchResult {
  long long params_total = 0;
  long long params_trainable = 0;
  double throughput = 0.0;
};
BenchResult bench(const Model& model, const HandRig& rig, int warmup,
                  int iters);

/// One CSV row (with matching header) and a human-readable block.
std::string metrics_csv_header(const MetricsReport& r);
std::string metrics_csv_row(const MetricsReport& r);
std::string metrics_text(const MetricsReport& r);

}  // namespace handkd
