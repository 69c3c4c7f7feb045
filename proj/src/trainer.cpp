#include "handkd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "handkd/binio.hpp"
#include "handkd/rng.hpp"

namespace handkd {

namespace {

constexpr uint64_t kShuffleStream = 0x53485546464c4531ULL;
constexpr uint64_t kPhiStream = 0x5048495f50524f4aULL;
constexpr int kQuickEvalCap = 64;  // per-epoch quick-look sample budget

bool needs_out(KDMode m) {
  return m == KDMode::kOutput || m == KDMode::kCombined;
}
bool needs_feat(KDMode m) {
  return m == KDMode::kFeature || m == KDMode::kCombined;
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1)
    throw std::invalid_argument("train: epochs must be >= 1, got " +
                                std::to_string(cfg.epochs));
  if (cfg.batch_size < 1)
    throw std::invalid_argument("train: batch_size must be >= 1, got " +
                                std::to_string(cfg.batch_size));
  // learning_rate 0 is a legitimate zero-step baseline; negative is not.
  if (cfg.adam.learning_rate < 0.0 || !std::isfinite(cfg.adam.learning_rate))
    throw std::invalid_argument("train: learning_rate must be >= 0");
  if (cfg.adam.beta1 < 0.0 || cfg.adam.beta1 >= 1.0 || cfg.adam.beta2 < 0.0 ||
      cfg.adam.beta2 >= 1.0)
    throw std::invalid_argument("train: Adam betas must lie in [0, 1)");
  if (cfg.adam.epsilon <= 0.0)
    throw std::invalid_argument("train: Adam epsilon must be positive");
}

void require_rig_match(const Dataset& ds, const HandRig& rig,
                       const char* what) {
  if (ds.samples.empty())
    throw std::invalid_argument(std::string(what) + ": dataset is empty");
  if (ds.rig_id != rig_digest(rig))
    throw std::invalid_argument(
        std::string(what) +
        ": dataset was generated with a different rig (content id mismatch)");
}

void require_net_matches_data(const NetConfig& cfg, const char* who) {
  if (cfg.input_channels != kImageChannels || cfg.input_h != kImageSize ||
      cfg.input_w != kImageSize)
    throw std::invalid_argument(
        std::string(who) + ": network expects " +
        std::to_string(cfg.input_channels) + "x" + std::to_string(cfg.input_h) +
        "x" + std::to_string(cfg.input_w) + " inputs but dataset images are " +
        std::to_string(kImageChannels) + "x" + std::to_string(kImageSize) +
        "x" + std::to_string(kImageSize));
}

/// Fan-in uniform init for the 1x1 teacher-to-student projection,
/// matching the network initializer's convention.
void init_phi(KDConfig& kd, int c_student, int c_teacher, uint64_t seed) {
  Rng rng(mix_seeds(seed, kPhiStream));
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_teacher));
  std::vector<double> w(static_cast<size_t>(c_student) * c_teacher);
  for (double& x : w) x = rng.uniform(-bound, bound);
  std::vector<double> b(static_cast<size_t>(c_student));
  for (double& x : b) x = rng.uniform(-bound, bound);
  kd.phi_weights =
      Tensor::from_vec({c_student, c_teacher}, std::move(w), true);
  kd.phi_bias = Tensor::from_vec({c_student}, std::move(b), true);
}

struct QuickEval {
  double j_err = 0.0, v_err = 0.0, f5 = 0.0, f15 = 0.0;
};

QuickEval quick_eval(const Model& model, const Dataset& ds,
                     const HandRig& rig) {
  const int n = std::min<int>(kQuickEvalCap, ds.size());
  QuickEval q;
  for (int i = 0; i < n; ++i) {
    const Sample& s = ds.samples[i];
    ForwardResult fr = forward_full(model, s.image, rig);
    HandOutput truth = hand_forward(rig, s.true_params);
    q.j_err += pa_mpjpe(fr.pred.k3d, truth.joints3d);
    q.v_err += pa_mpvpe(fr.vertices, truth.vertices);
    q.f5 += f_score(fr.vertices, truth.vertices, 5.0);
    q.f15 += f_score(fr.vertices, truth.vertices, 15.0);
  }
  q.j_err /= n;
  q.v_err /= n;
  q.f5 /= n;
  q.f15 /= n;
  return q;
}

/// The one training loop both entry points share. `teacher` is null for
/// plain supervised training and for mode NONE, where the trajectory must
/// be bit-identical to supervised training anyway.
TrainResult train_loop(const Dataset& ds, const HandRig& rig,
                       const NetConfig& net_cfg, const TrainConfig& cfg,
                       const Model* teacher) {
  validate_train_config(cfg);
  require_rig_match(ds, rig, "train");
  require_net_matches_data(net_cfg, "train");

  KDConfig kd = cfg.kd;
  const bool use_kd = teacher != nullptr && kd.mode != KDMode::kNone;
  if (use_kd) {
    require_net_matches_data(teacher->config, "train (teacher)");
    if (needs_feat(kd.mode) && !kd.phi_weights.defined())
      init_phi(kd, net_cfg.channel_widths.back(),
               teacher->config.channel_widths.back(), cfg.seed);
  }

  Model model = init_model(net_cfg);
  std::vector<NamedParam> group = named_params(model);
  if (use_kd && needs_feat(kd.mode)) {
    group.push_back({"phi_weight", kd.phi_weights});
    group.push_back({"phi_bias", kd.phi_bias});
  }
  AdamState state = adam_init(group);

  const int n = ds.size();
  std::vector<int> order(n);
  Rng shuffle_rng(mix_seeds(cfg.seed, kShuffleStream));
  TrainLog log;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);

    double sum_gt = 0.0, sum_out = 0.0, sum_feat = 0.0, sum_total = 0.0;
    int batch_index = 0;
    for (int start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      const int b = std::min(cfg.batch_size, n - start);
      for (NamedParam& p : group) p.tensor.zero_grad();

      for (int k = 0; k < b; ++k) {
        const Sample& s = ds.samples[order[start + k]];
        const std::string where = "epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(batch_index + 1);
        try {
          ForwardResult fs = forward_full(model, s.image, rig);
          Tensor total;
          double v_gt, v_out = 0.0, v_feat = 0.0;
          if (!use_kd) {
            total = loss_gt(fs.pred, s.gt, cfg.gt_weights);
            v_gt = total.item();
          } else {
            ForwardResult ft = forward_full(*teacher, s.image, rig);
            total = total_loss(kd, fs.pred, &ft.pred, &fs.feature_map,
                               &ft.feature_map, s.gt, cfg.gt_weights);
            v_gt = loss_gt(fs.pred, s.gt, cfg.gt_weights).item();
            if (needs_out(kd.mode))
              v_out = loss_kd_out(fs.pred, ft.pred).item();
            if (needs_feat(kd.mode))
              v_feat = loss_kd_feat(fs.feature_map, ft.feature_map,
                                    kd.phi_weights, kd.phi_bias)
                           .item();
          }
          const double v_total = total.item();
          if (!std::isfinite(v_total))
            throw NumericalError("loss left the finite range (" + where +
                                 ")");
          backward(mul(total, 1.0 / b));
          sum_gt += v_gt;
          sum_out += v_out;
          sum_feat += v_feat;
          sum_total += v_total;
        } catch (const NumericalError& e) {
          throw NumericalError("training aborted at " + where + ": " +
                               e.what());
        } catch (const std::invalid_argument& e) {
          // Shapes were validated up front, so a mid-run invalid_argument
          // means numerical garbage reached a validation gate.
          throw NumericalError("training aborted at " + where + ": " +
                               e.what());
        }
      }
      adam_step(group, state, cfg.adam);
    }

    QuickEval q;
    try {
      q = quick_eval(model, ds, rig);
    } catch (const NumericalError& e) {
      // A diverged final batch surfaces here when the epoch's own samples
      // all predated the explosion.
      throw NumericalError("training aborted at epoch " +
                           std::to_string(epoch) + " (evaluation): " +
                           e.what());
    } catch (const std::invalid_argument& e) {
      throw NumericalError("training aborted at epoch " +
                           std::to_string(epoch) + " (evaluation): " +
                           e.what());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_gt = sum_gt / n;
    rec.loss_kd_out = sum_out / n;
    rec.loss_kd_feat = sum_feat / n;
    rec.loss_total = sum_total / n;
    rec.j_err = q.j_err;
    rec.v_err = q.v_err;
    rec.f_at_5 = q.f5;
    rec.f_at_15 = q.f15;
    rec.wall_seconds =
        std::chrono::duration_cast<std::chrono::duration<double>>(
            std::chrono::steady_clock::now() - t0)
            .count();
    log.epochs.push_back(rec);
  }

  return TrainResult{std::move(model), std::move(log), std::move(kd),
                     std::move(state)};
}

}  // namespace

AdamState adam_init(const std::vector<NamedParam>& group) {
  AdamState st;
  for (const NamedParam& p : group) {
    if (!p.tensor.requires_grad())
      throw std::invalid_argument("adam_init: parameter '" + p.name +
                                  "' does not track gradients (frozen?)");
    st.m.emplace_back(p.tensor.numel(), 0.0);
    st.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return st;
}

void adam_step(const std::vector<NamedParam>& group, AdamState& state,
               const AdamHyper& hyper) {
  if (group.size() != state.m.size() || group.size() != state.v.size())
    throw std::invalid_argument(
        "adam_step: state covers " + std::to_string(state.m.size()) +
        " parameters but the group has " + std::to_string(group.size()));
  state.step += 1;
  const double bc1 =
      1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 =
      1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < group.size(); ++i) {
    Tensor t = group[i].tensor;
    auto& x = t.raw_data();
    if (state.m[i].size() != x.size())
      throw std::invalid_argument("adam_step: parameter '" + group[i].name +
                                  "' changed size under the optimizer");
    const std::vector<double>* g = t.has_grad() ? &t.grad() : nullptr;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t k = 0; k < x.size(); ++k) {
      const double gk = g ? (*g)[k] : 0.0;
      m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
      v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
      x[k] -= hyper.learning_rate * (m[k] / bc1) /
              (std::sqrt(v[k] / bc2) + hyper.epsilon);
    }
  }
}

std::string train_log_csv(const TrainLog& log) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,loss_gt,loss_kd_out,loss_kd_feat,loss_total,"
        "j_err_mm,v_err_mm,f_at_5mm,f_at_15mm\n";
  for (const EpochRecord& r : log.epochs)
    os << r.epoch << ',' << r.loss_gt << ',' << r.loss_kd_out << ','
       << r.loss_kd_feat << ',' << r.loss_total << ',' << r.j_err << ','
       << r.v_err << ',' << r.f_at_5 << ',' << r.f_at_15 << '\n';
  return os.str();
}

void save_train_log(const TrainLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string csv = train_log_csv(log);
  out.write(csv.data(), static_cast<std::streamsize>(csv.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

TrainResult train_teacher(const Dataset& ds, const HandRig& rig,
                          const NetConfig& net_cfg, const TrainConfig& cfg) {
  if (cfg.kd.mode != KDMode::kNone)
    throw std::invalid_argument(
        "train_teacher: supervised training uses mode none; distillation "
        "needs a frozen teacher (use distill)");
  return train_loop(ds, rig, net_cfg, cfg, nullptr);
}

TrainResult train_teacher(const Dataset& ds, const HandRig& rig,
                          const TrainConfig& cfg) {
  return train_teacher(ds, rig, teacher_config(cfg.seed), cfg);
}

TrainResult distill(const Model& teacher, const NetConfig& student_cfg,
                    const TrainConfig& cfg, const Dataset& ds,
                    const HandRig& rig) {
  if (!teacher.frozen)
    throw std::invalid_argument(
        "distill: the teacher must be frozen (call freeze first)");
  // Mode NONE skips the teacher entirely so the trajectory is
  // bit-identical to supervised training of the same configuration.
  const Model* t = cfg.kd.mode == KDMode::kNone ? nullptr : &teacher;
  return train_loop(ds, rig, student_cfg, cfg, t);
}

void save_checkpoint(const std::string& path, const Model& model,
                     const Tensor& phi_weights, const Tensor& phi_bias,
                     const AdamState& state) {
  const bool has_phi = phi_weights.defined();
  if (has_phi != phi_bias.defined())
    throw std::invalid_argument(
        "save_checkpoint: projection weights and bias must be saved "
        "together");
  const size_t expect =
      named_params(model).size() + (has_phi ? 2 : 0);
  if (state.m.size() != expect || state.v.size() != expect)
    throw std::invalid_argument(
        "save_checkpoint: optimizer state covers " +
        std::to_string(state.m.size()) + " parameters, expected " +
        std::to_string(expect));

  BinWriter w(path);
  write_model(w, model);
  w.u8(has_phi ? 1 : 0);
  if (has_phi) {
    w.section("phi_weight", phi_weights.values());
    w.section("phi_bias", phi_bias.values());
  }
  w.u64(state.step);
  w.u32(static_cast<uint32_t>(state.m.size()));
  for (size_t i = 0; i < state.m.size(); ++i) {
    w.section("adam_m" + std::to_string(i), state.m[i]);
    w.section("adam_v" + std::to_string(i), state.v[i]);
  }
  w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
  BinReader r(path);
  Checkpoint ck;
  ck.model = read_model(r, path);

  const uint8_t has_phi = r.u8("projection flag");
  if (has_phi > 1)
    throw FormatError(path + ": projection flag must be 0 or 1, got " +
                      std::to_string(has_phi));
  if (has_phi) {
    std::vector<double> w = r.section("phi_weight");
    std::vector<double> b = r.section("phi_bias");
    const int c_s = static_cast<int>(b.size());
    if (c_s < 1 || w.size() % b.size() != 0 || w.size() / b.size() < 1)
      throw FormatError(path +
                        ": projection sections have inconsistent sizes");
    const int c_t = static_cast<int>(w.size() / b.size());
    ck.phi_weights = Tensor::from_vec({c_s, c_t}, std::move(w), true);
    ck.phi_bias = Tensor::from_vec({c_s}, std::move(b), true);
  }

  ck.state.step = r.u64("optimizer step");
  const uint32_t entries = r.u32("optimizer entry count");
  std::vector<size_t> sizes;
  for (const NamedParam& p : named_params(ck.model))
    sizes.push_back(static_cast<size_t>(p.tensor.numel()));
  if (has_phi) {
    sizes.push_back(static_cast<size_t>(ck.phi_weights.numel()));
    sizes.push_back(static_cast<size_t>(ck.phi_bias.numel()));
  }
  if (entries != sizes.size())
    throw FormatError(path + ": optimizer state holds " +
                      std::to_string(entries) + " entries, expected " +
                      std::to_string(sizes.size()));
  for (uint32_t i = 0; i < entries; ++i) {
    std::vector<double> m = r.section("adam_m" + std::to_string(i));
    std::vector<double> v = r.section("adam_v" + std::to_string(i));
    if (m.size() != sizes[i] || v.size() != sizes[i])
      throw FormatError(path + ": optimizer entry " + std::to_string(i) +
                        " has " + std::to_string(m.size()) + "/" +
                        std::to_string(v.size()) + " values, expected " +
                        std::to_string(sizes[i]));
    ck.state.m.push_back(std::move(m));
    ck.state.v.push_back(std::move(v));
  }
  if (!r.at_end())
    throw FormatError(path + ": trailing bytes after checkpoint payload");
  return ck;
}

std::vector<SweepCell> default_grid() {
  const double lambdas[] = {0.3, 0.5, 0.8};
  const std::pair<double, double> pairs[] = {{0.3, 6.0},
                                             {0.5, 6.0},
                                             {0.8, 12.0}};
  std::vector<SweepCell> grid;
  for (const char* size : {"small", "large"})
    for (uint64_t seed : {0, 1, 2}) {
      grid.push_back({KDMode::kNone, 0.0, 0.0, size, seed});
      for (double l : lambdas)
        grid.push_back({KDMode::kOutput, l, 0.0, size, seed});
      for (auto [l, g] : pairs)
        grid.push_back({KDMode::kFeature, l, g, size, seed});
      for (auto [l, g] : pairs)
        grid.push_back({KDMode::kCombined, l, g, size, seed});
    }
  return grid;
}

namespace {

// Comma-free so the name can sit in a CSV cell unquoted.
std::string backbone_name(const NetConfig& cfg, const std::string& size) {
  std::ostringstream os;
  os << size << "[";
  for (size_t i = 0; i < cfg.channel_widths.size(); ++i)
    os << (i ? "x" : "") << cfg.channel_widths[i];
  os << "]/h" << cfg.head_dim;
  return os.str();
}

}  // namespace

std::vector<SweepRow> run_sweep(const std::vector<SweepCell>& grid,
                                const Model& teacher, const Dataset& train_ds,
                                const Dataset& eval_ds, const HandRig& rig,
                                const TrainConfig& base_cfg,
                                const std::vector<double>& thresholds,
                                int bench_warmup, int bench_iters) {
  if (grid.empty())
    throw std::invalid_argument("run_sweep: the grid is empty");
  std::vector<SweepRow> rows;
  for (const SweepCell& cell : grid) {
    SweepRow row;
    row.cell = cell;
    try {
      NetConfig scfg = student_config(cell.student_size, cell.seed);
      row.backbone = backbone_name(scfg, cell.student_size);
      TrainConfig tc = base_cfg;
      tc.seed = cell.seed;
      tc.kd.mode = cell.mode;
      tc.kd.lambda_kd = cell.lambda_kd;
      tc.kd.gamma_fd = cell.gamma_fd;
      tc.kd.phi_weights = Tensor();
      tc.kd.phi_bias = Tensor();
      TrainResult res = distill(teacher, scfg, tc, train_ds, rig);
      MetricsReport mr = evaluate(res.model, eval_ds, rig, thresholds);
      row.j_err = mr.j_err;
      row.v_err = mr.v_err;
      row.f_at = mr.f_at;
      row.params = param_count(res.model);
      row.throughput = bench(res.model, rig, bench_warmup, bench_iters)
                           .throughput;
      row.model_digest = param_digest(res.model);
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::vector<const SweepRow*> sorted;
  for (const SweepRow& r : rows) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const SweepRow* a, const SweepRow* b) {
                     return std::make_tuple(static_cast<int>(a->cell.mode),
                                            a->cell.lambda_kd,
                                            a->cell.gamma_fd, a->backbone,
                                            a->cell.seed) <
                            std::make_tuple(static_cast<int>(b->cell.mode),
                                            b->cell.lambda_kd,
                                            b->cell.gamma_fd, b->backbone,
                                            b->cell.seed);
                   });
  // Threshold columns come from the first successful row (one sweep, one
  // threshold set).
  std::vector<double> thresholds;
  for (const SweepRow* r : sorted)
    if (r->ok) {
      for (const auto& [t, v] : r->f_at) thresholds.push_back(t);
      break;
    }

  std::ostringstream os;
  os.precision(17);
  os << "backbone,mode,lambda_kd,gamma_fd,seed,j_err_mm,v_err_mm";
  for (double t : thresholds) os << ",f_at_" << t << "mm";
  os << ",params,throughput_fps,status\n";
  for (const SweepRow* r : sorted) {
    os << r->backbone << ',' << kd_mode_name(r->cell.mode) << ','
       << r->cell.lambda_kd << ',' << r->cell.gamma_fd << ',' << r->cell.seed
       << ',';
    if (r->ok) {
      os << r->j_err << ',' << r->v_err;
      for (double t : thresholds) {
        auto it = r->f_at.find(t);
        os << ',' << (it == r->f_at.end() ? 0.0 : it->second);
      }
      os << ',' << r->params << ',' << r->throughput << ",ok\n";
    } else {
      // Empty j/v, F, params, and throughput cells, then the status.
      for (size_t i = 0; i < 4 + thresholds.size(); ++i) os << ',';
      std::string msg = r->error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      os << "failed: " << msg << '\n';
    }
  }
  return os.str();
}

}  // namespace handkd
