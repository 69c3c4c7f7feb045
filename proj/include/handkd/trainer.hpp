#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "handkd/data.hpp"
#include "handkd/losses.hpp"
#include "handkd/metrics.hpp"
#include "handkd/nets.hpp"

namespace handkd {

/// Adam hyperparameters. Defaults are the project-wide training settings;
/// every run records them in its log so results stay interpretable.
struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second gradient moments per parameter, plus the shared step
/// counter. Entries are parallel to the optimizer's parameter group.
struct AdamState {
  uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Sizes the moment buffers for `group` (all zeros, step 0).
AdamState adam_init(const std::vector<NamedParam>& group);

/// One bias-corrected Adam update, in place, reading each parameter's
/// accumulated gradient (absent gradient counts as zero). Deterministic.
void adam_step(const std::vector<NamedParam>& group, AdamState& state,
               const AdamHyper& hyper);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  AdamHyper adam;  // learning_rate 0 is allowed: a zero-step baseline run
  uint64_t seed = 0;
  KDConfig kd;  // mode/weights; the projection φ is created by distill
  GtWeights gt_weights;
};

/// One row of the training log. Loss columns are epoch means of the
/// per-sample values; the error columns are a quick look at the first
/// few training samples (full evaluation is the metrics module's job).
/// wall_seconds stays in memory only — the CSV is byte-deterministic.
struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss_gt = 0.0;
  double loss_kd_out = 0.0;
  double loss_kd_feat = 0.0;
  double loss_total = 0.0;
  double j_err = 0.0;
  double v_err = 0.0;
  double f_at_5 = 0.0;
  double f_at_15 = 0.0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

/// CSV with a header row and one row per epoch. Bit-deterministic for a
/// given trajectory: wall time is deliberately not a column.
std::string train_log_csv(const TrainLog& log);
void save_train_log(const TrainLog& log, const std::string& path);

/// A finished run: the trained model, its log, the KD configuration
/// actually used (carrying the trained φ, if any), and the final
/// optimizer state (so training can be checkpointed).
struct TrainResult {
  Model model;
  TrainLog log;
  KDConfig kd;
  AdamState state;
};

/// Supervised training (no distillation) of `net_cfg` on the dataset.
/// The convenience overload trains the default teacher configuration
/// seeded by the run seed. Throws NumericalError with the epoch/batch
/// location if the loss leaves the finite range.
TrainResult train_teacher(const Dataset& ds, const HandRig& rig,
                          const NetConfig& net_cfg, const TrainConfig& cfg);
TrainResult train_teacher(const Dataset& ds, const HandRig& rig,
                          const TrainConfig& cfg);

/// Knowledge distillation: every batch runs the frozen teacher (graph-free)
/// and the student on the same inputs, applies the mode's total loss, and
/// steps the student (and φ for the feature modes) with Adam. The teacher
/// is never modified. Mode NONE degenerates to train_teacher exactly
/// (the teacher forward is skipped entirely).
TrainResult distill(const Model& teacher, const NetConfig& student_cfg,
                    const TrainConfig& cfg, const Dataset& ds,
                    const HandRig& rig);

/// Checkpoint = the model file format plus φ (when present) and the
/// optimizer-state sections. Round-trips bit-exactly.
struct Checkpoint {
  Model model;
  Tensor phi_weights;  // undefined when the run carries no projection
  Tensor phi_bias;
  AdamState state;
};
void save_checkpoint(const std::string& path, const Model& model,
                     const Tensor& phi_weights, const Tensor& phi_bias,
                     const AdamState& state);
Checkpoint load_checkpoint(const std::string& path);

/// One ablation cell: distill with these settings, then evaluate.
struct SweepCell {
  KDMode mode = KDMode::kNone;
  double lambda_kd = 0.0;
  double gamma_fd = 0.0;
  std::string student_size = "small";  // "small" | "large"
  uint64_t seed = 0;
};

struct SweepRow {
  SweepCell cell;
  std::string backbone;  // e.g. "small[8x16x32]/h32"
  bool ok = false;
  std::string error;  // set when the cell failed; the sweep continues
  double j_err = 0.0;
  double v_err = 0.0;
  std::map<double, double> f_at;
  long long params = 0;  // trainable student parameters
  double throughput = 0.0;
  std::string model_digest;  // fingerprint for rerun comparisons
};

/// The ablation protocol: all four modes, λ ∈ {0.3, 0.5, 0.8} with γ
/// paired as {(0.3,6), (0.5,6), (0.8,12)} for the feature modes, both
/// student sizes, seeds {0,1,2}.
std::vector<SweepCell> default_grid();

/// Runs every cell (distill on train_ds, evaluate on eval_ds, bench) and
/// never stops on a cell failure — the row records the error instead.
std::vector<SweepRow> run_sweep(const std::vector<SweepCell>& grid,
                                const Model& teacher, const Dataset& train_ds,
                                const Dataset& eval_ds, const HandRig& rig,
                                const TrainConfig& base_cfg,
                                const std::vector<double>& thresholds =
                                    kDefaultThresholds,
                                int bench_warmup = 3, int bench_iters = 12);

/// CSV of the rows sorted by (mode, λ, γ, backbone, seed). All columns
/// except throughput are deterministic for fixed inputs and seeds.
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace handkd
