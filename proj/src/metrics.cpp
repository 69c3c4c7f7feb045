#include "handkd/metrics.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace handkd {

namespace {

void require_cloud(const Tensor& t, const char* what) {
  if (!t.defined() || t.ndim() != 2 || t.extent(1) != 3 || t.extent(0) < 1)
    throw std::invalid_argument(std::string(what) + ": need an N×3 cloud" +
                                (t.defined() ? ", got " + shape_str(t.shape())
                                             : ""));
  if (!t.all_finite())
    throw std::invalid_argument(std::string(what) +
                                ": cloud contains non-finite values");
}

}  // namespace

SimilarityTransform procrustes_align(const Tensor& p, const Tensor& q) {
  require_cloud(p, "procrustes_align");
  require_cloud(q, "procrustes_align");
  const int n = p.extent(0);
  if (q.extent(0) != n)
    throw std::invalid_argument("procrustes_align: clouds differ in size, " +
                                shape_str(p.shape()) + " vs " +
                                shape_str(q.shape()));
  if (n < 3)
    throw std::invalid_argument(
        "procrustes_align: need at least 3 points, got " + std::to_string(n));

  const auto& pv = p.values();
  const auto& qv = q.values();
  Eigen::Vector3d pm = Eigen::Vector3d::Zero(), qm = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      pm[k] += pv[3 * i + k];
      qm[k] += qv[3 * i + k];
    }
  pm /= n;
  qm /= n;

  double var_p = 0.0;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();  // Σ (q-q̄)(p-p̄)ᵀ / n
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d pc(pv[3 * i] - pm[0], pv[3 * i + 1] - pm[1],
                       pv[3 * i + 2] - pm[2]);
    Eigen::Vector3d qc(qv[3 * i] - qm[0], qv[3 * i + 1] - qm[1],
                       qv[3 * i + 2] - qm[2]);
    var_p += pc.squaredNorm();
    cov += qc * pc.transpose();
  }
  var_p /= n;
  cov /= n;
  if (var_p < 1e-12)
    throw std::invalid_argument(
        "procrustes_align: source cloud is degenerate (zero variance)");

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  Eigen::Vector3d d = svd.singularValues();
  Eigen::Vector3d sign(1, 1, 1);
  if (u.determinant() * v.determinant() < 0.0) sign[2] = -1.0;
  Eigen::Matrix3d rot = u * sign.asDiagonal() * v.transpose();
  const double scale = d.dot(sign) / var_p;
  Eigen::Vector3d trans = qm - scale * (rot * pm);

  SimilarityTransform t;
  t.scale = scale;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.rotation[3 * r + c] = rot(r, c);
  for (int k = 0; k < 3; ++k) t.translation[k] = trans[k];
  return t;
}

std::vector<double> apply_similarity(const SimilarityTransform& t,
                                     const Tensor& p) {
  require_cloud(p, "apply_similarity");
  const int n = p.extent(0);
  const auto& pv = p.values();
  std::vector<double> out(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < 3; ++r) {
      double acc = t.translation[r];
      for (int c = 0; c < 3; ++c)
        acc += t.scale * t.rotation[3 * r + c] * pv[3 * i + c];
      out[3 * i + r] = acc;
    }
  return out;
}

namespace {

double aligned_mean_distance(const Tensor& pred, const Tensor& gt) {
  SimilarityTransform t = procrustes_align(pred, gt);
  std::vector<double> moved = apply_similarity(t, pred);
  const auto& gv = gt.values();
  const int n = pred.extent(0);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double dx = moved[3 * i] - gv[3 * i];
    const double dy = moved[3 * i + 1] - gv[3 * i + 1];
    const double dz = moved[3 * i + 2] - gv[3 * i + 2];
    sum += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return sum / n;
}

}  // namespace

double pa_mpjpe(const Tensor& pred, const Tensor& gt) {
  return aligned_mean_distance(pred, gt);
}

double pa_mpvpe(const Tensor& pred_verts, const Tensor& gt_verts) {
  return aligned_mean_distance(pred_verts, gt_verts);
}

double f_score(const Tensor& pred_verts, const Tensor& gt_verts,
               double threshold_mm, bool aligned) {
  require_cloud(pred_verts, "f_score");
  require_cloud(gt_verts, "f_score");
  if (threshold_mm <= 0.0)
    throw std::invalid_argument("f_score: threshold must be positive");
  std::vector<double> pv;
  if (aligned)
    pv = apply_similarity(procrustes_align(pred_verts, gt_verts), pred_verts);
  else
    pv = pred_verts.values();
  const auto& gv = gt_verts.values();
  const int np = pred_verts.extent(0), ng = gt_verts.extent(0);
  const double t2 = threshold_mm * threshold_mm;

  // Exhaustive nearest-neighbor counting in both directions.
  auto hits = [&](const std::vector<double>& a, int na,
                  const std::vector<double>& b, int nb) {
    int h = 0;
    for (int i = 0; i < na; ++i) {
      double best = 1e300;
      for (int j = 0; j < nb; ++j) {
        const double dx = a[3 * i] - b[3 * j];
        const double dy = a[3 * i + 1] - b[3 * j + 1];
        const double dz = a[3 * i + 2] - b[3 * j + 2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      h += best <= t2;
    }
    return h;
  };
  const double precision = static_cast<double>(hits(pv, np, gv, ng)) / np;
  const double recall = static_cast<double>(hits(gv, ng, pv, np)) / ng;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

MetricsReport evaluate(const Predictor& predictor, const Dataset& ds,
                       const HandRig& rig,
                       const std::vector<double>& thresholds) {
  if (ds.samples.empty())
    throw std::invalid_argument("evaluate: dataset is empty");
  for (double t : thresholds)
    if (t <= 0.0)
      throw std::invalid_argument("evaluate: thresholds must be positive");
  MetricsReport rep;
  rep.n_samples = ds.size();
  for (double t : thresholds) rep.f_at[t] = 0.0;
  for (const Sample& s : ds.samples) {
    HandOutput truth = hand_forward(rig, s.true_params);
    PredictedShape pred = predictor(s);
    rep.j_err += pa_mpjpe(pred.joints, truth.joints3d);
    rep.v_err += pa_mpvpe(pred.vertices, truth.vertices);
    for (double t : thresholds)
      rep.f_at[t] += f_score(pred.vertices, truth.vertices, t);
  }
  rep.j_err /= rep.n_samples;
  rep.v_err /= rep.n_samples;
  for (auto& [t, v] : rep.f_at) v /= rep.n_samples;
  return rep;
}

MetricsReport evaluate(const Model& model, const Dataset& ds,
                       const HandRig& rig,
                       const std::vector<double>& thresholds) {
  Predictor p = [&](const Sample& s) {
    ForwardResult fr = forward_full(model, s.image, rig);
    return PredictedShape{fr.pred.k3d.detach(), fr.vertices.detach()};
  };
  MetricsReport rep = evaluate(p, ds, rig, thresholds);
  rep.params_total = param_count_total(model);
  rep.params_trainable = param_count(model);
  return rep;
}

BenchResult bench(const Model& model, const HandRig& rig, int warmup,
                  int iters) {
  if (iters < 1)
    throw std::invalid_argument("bench: iters must be >= 1");
  if (warmup < 0)
    throw std::invalid_argument("bench: warmup must be >= 0");
  Rng rng(0);
  const NetConfig& cfg = model.config;
  std::vector<double> img(static_cast<size_t>(cfg.input_channels) *
                          cfg.input_h * cfg.input_w);
  for (double& x : img) x = rng.uniform(0.0, 1.0);
  Tensor input = Tensor::from_vec({cfg.input_channels, cfg.input_h,
                                   cfg.input_w},
                                  std::move(img));
  volatile double sink = 0.0;  // keep the forwards observable
  for (int i = 0; i < warmup; ++i)
    sink = sink + forward_full(model, input, rig).pred.k2d.values()[0];
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i)
    sink = sink + forward_full(model, input, rig).pred.k2d.values()[0];
  const auto stop = std::chrono::steady_clock::now();
  const double secs =
      std::chrono::duration_cast<std::chrono::duration<double>>(stop - start)
          .count();
  BenchResult r;
  r.params_total = param_count_total(model);
  r.params_trainable = param_count(model);
  r.throughput = iters / std::max(secs, 1e-9);
  return r;
}

std::string metrics_csv_header(const MetricsReport& r) {
  std::ostringstream os;
  os << "j_err_mm,v_err_mm";
  for (const auto& [t, v] : r.f_at) os << ",f_at_" << t << "mm";
  os << ",n_samples,params_total,params_trainable,throughput_fps\n";
  return os.str();
}

std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << r.j_err << "," << r.v_err;
  for (const auto& [t, v] : r.f_at) os << "," << v;
  os << "," << r.n_samples << "," << r.params_total << ","
     << r.params_trainable << "," << r.throughput << "\n";
  return os.str();
}

std::string metrics_text(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "  J_err (PA-MPJPE): " << r.j_err << " mm\n"
     << "  V_err (PA-MPVPE): " << r.v_err << " mm\n";
  for (const auto& [t, v] : r.f_at)
    os << "  F@" << t << "mm: " << v << "\n";
  os << "  samples: " << r.n_samples << "\n"
     << "  params: " << r.params_total << " total, " << r.params_trainable
     << " trainable\n";
  if (r.throughput > 0.0)
    os << "  throughput: " << r.throughput << " forwards/s\n";
  return os.str();
}

}  // namespace handkd
