#include "handkd/metrics.hpp"

#include <cmath>

#include "doctest.h"
#include "handkd/rng.hpp"
#include "oracles.hpp"

using namespace handkd;

namespace {

Tensor random_cloud(Rng& rng, int n, double extent) {
  std::vector<double> v(static_cast<size_t>(n) * 3);
  for (double& x : v) x = rng.uniform(-extent, extent);
  return Tensor::from_vec({n, 3}, std::move(v));
}

// A random similarity transform with scale in [0.5, 2].
oracles::Similarity random_similarity(Rng& rng) {
  oracles::Similarity s;
  const double w[3] = {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
                       rng.uniform(-2.0, 2.0)};
  oracles::rodrigues_exp(w, s.r.data());
  s.s = rng.uniform(0.5, 2.0);
  for (double& t : s.t) t = rng.uniform(-100.0, 100.0);
  return s;
}

Tensor transformed(const oracles::Similarity& sim, const Tensor& p) {
  const int n = p.extent(0);
  std::vector<double> out(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < 3; ++r) {
      double acc = sim.t[r];
      for (int c = 0; c < 3; ++c)
        acc += sim.s * sim.r[3 * r + c] * p.values()[3 * i + c];
      out[3 * i + r] = acc;
    }
  return Tensor::from_vec({n, 3}, std::move(out));
}

}  // namespace

TEST_CASE("aligning a cloud to itself is the identity transform") {
  Rng rng(51);
  Tensor p = random_cloud(rng, 21, 80.0);
  SimilarityTransform t = procrustes_align(p, p);
  CHECK(t.scale == doctest::Approx(1.0).epsilon(1e-12));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(t.rotation[3 * r + c] - (r == c ? 1.0 : 0.0)) <= 1e-12);
  for (double v : t.translation) CHECK(std::abs(v) <= 1e-10);
}

TEST_CASE("exact similarity models are recovered to 1e-10") {
  Rng rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p = random_cloud(rng, 21, 80.0);
    oracles::Similarity want = random_similarity(rng);
    Tensor q = transformed(want, p);
    SimilarityTransform got = procrustes_align(p, q);
    CHECK(std::abs(got.scale - want.s) <= 1e-10 * want.s);
    for (int i = 0; i < 9; ++i)
      CHECK(std::abs(got.rotation[i] - want.r[i]) <= 1e-10);
    for (int k = 0; k < 3; ++k)
      CHECK(std::abs(got.translation[k] - want.t[k]) <= 1e-8);
    // Rotation stays proper and orthonormal.
    const auto& r = got.rotation;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += r[3 * k + i] * r[3 * k + j];
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-10);
      }
    const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) -
                       r[1] * (r[3] * r[8] - r[5] * r[6]) +
                       r[2] * (r[3] * r[7] - r[4] * r[6]);
    CHECK(std::abs(det - 1.0) <= 1e-10);
  }
}

TEST_CASE("reflection-shaped problems still yield a proper rotation") {
  // A target that is a mirrored copy of the source would tempt an
  // unconstrained fit into det = -1; the sign fix must forbid that.
  Rng rng(53);
  Tensor p = random_cloud(rng, 21, 50.0);
  std::vector<double> mirrored = p.values();
  for (size_t i = 0; i < mirrored.size(); i += 3) mirrored[i] = -mirrored[i];
  SimilarityTransform t =
      procrustes_align(p, Tensor::from_vec({21, 3}, std::move(mirrored)));
  const auto& r = t.rotation;
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) -
                     r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  CHECK(det == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("closed-form fit is optimal against a rotation grid search") {
  Rng rng(54);

  // Liveness: scale+translation only (the grid contains the identity
  // rotation exactly), so a working grid must drive the residual to ~0.
  {
    Tensor p = random_cloud(rng, 3, 40.0);
    oracles::Similarity sim = random_similarity(rng);
    sim.r = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    Tensor q = transformed(sim, p);
    CHECK(oracles::grid_search_residual(p.values(), q.values(), 50, 90) <=
          1e-8);
  }

  // Noisy general case: no rotation in a dense grid may beat the fit,
  // and the independent residual formula must agree at the fitted R.
  for (int trial = 0; trial < 3; ++trial) {
    Tensor p = random_cloud(rng, 3, 40.0);
    Tensor q = transformed(random_similarity(rng), p);
    std::vector<double> noisy = q.values();
    for (double& x : noisy) x += rng.uniform(-3.0, 3.0);
    q = Tensor::from_vec({3, 3}, std::move(noisy));

    SimilarityTransform t = procrustes_align(p, q);
    std::vector<double> moved = apply_similarity(t, p);
    double res_opt = 0.0;
    for (int i = 0; i < 9; ++i) {
      const double d = moved[i] - q.values()[i];
      res_opt += d * d;
    }
    CHECK(res_opt <=
          oracles::grid_search_residual(p.values(), q.values(), 200, 360) +
              1e-9);
    // The oracle's best (s, t) for the fitted rotation reproduces the
    // fit's own residual, so scale and translation are optimal too.
    CHECK(std::abs(oracles::residual_for_rotation(t.rotation, p.values(),
                                                  q.values()) -
                   res_opt) <= 1e-8 * (1.0 + res_opt));
  }
}

TEST_CASE("degenerate alignment inputs are rejected") {
  Tensor flat = Tensor::full({5, 3}, 2.5);  // zero variance
  Rng rng(55);
  Tensor q = random_cloud(rng, 5, 10.0);
  CHECK_THROWS_AS(procrustes_align(flat, q), std::invalid_argument);
  CHECK_THROWS_AS(procrustes_align(random_cloud(rng, 2, 1.0),
                                   random_cloud(rng, 2, 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(procrustes_align(random_cloud(rng, 4, 1.0),
                                   random_cloud(rng, 5, 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(procrustes_align(Tensor::zeros({4, 2}), q),
                  std::invalid_argument);
}

TEST_CASE("aligned joint error: zero at equality, blind to similarity, "
          "matching an independent implementation") {
  Rng rng(56);
  Tensor gt = random_cloud(rng, 21, 80.0);
  CHECK(pa_mpjpe(gt, gt) <= 1e-10);

  Tensor moved = transformed(random_similarity(rng), gt);
  CHECK(pa_mpjpe(moved, gt) <= 1e-9);

  // One joint off by 1 mm: compare against the quaternion-method oracle.
  std::vector<double> off = gt.values();
  off[3 * 7 + 0] += 1.0;
  Tensor pred = Tensor::from_vec({21, 3}, off);
  const double got = pa_mpjpe(pred, gt);
  const double want = oracles::pa_mean_distance(pred.values(), gt.values());
  CHECK(got == doctest::Approx(want).epsilon(1e-9));
  CHECK(got > 0.0);
  // Alignment minimizes the squared sum (raw value 1 here), so the mean
  // distance is capped by the raw RMS even though it may exceed the raw
  // mean when the optimizer spreads one joint's error over all of them.
  CHECK(got <= std::sqrt(1.0 / 21.0) + 1e-12);
}

TEST_CASE("alignment never increases the squared error it optimizes") {
  Rng rng(57);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor gt = random_cloud(rng, 21, 60.0);
    std::vector<double> noisy = gt.values();
    for (double& x : noisy) x += rng.uniform(-10.0, 10.0);
    Tensor pred = Tensor::from_vec({21, 3}, std::move(noisy));
    double sq = 0.0;
    for (size_t i = 0; i < pred.values().size(); ++i) {
      const double d = pred.values()[i] - gt.values()[i];
      sq += d * d;
    }
    // The identity is a feasible similarity, so the aligned squared error
    // cannot exceed the raw one; Cauchy-Schwarz then caps the aligned
    // mean distance by the raw RMS.
    CHECK(pa_mpjpe(pred, gt) <= std::sqrt(sq / 21.0) + 1e-12);
  }
}

TEST_CASE("PA invariance holds across 1000 random similarity transforms") {
  Rng rng(58);
  Tensor gt = random_cloud(rng, 21, 80.0);
  std::vector<double> noisy = gt.values();
  for (double& x : noisy) x += rng.uniform(-5.0, 5.0);
  Tensor pred = Tensor::from_vec({21, 3}, std::move(noisy));
  const double base = pa_mpjpe(pred, gt);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor warped = transformed(random_similarity(rng), pred);
    CHECK(std::abs(pa_mpjpe(warped, gt) - base) <= 1e-9);
  }
}

TEST_CASE("vertex error mirrors the joint error on 97-point clouds") {
  Rng rng(59);
  Tensor gt = random_cloud(rng, 97, 80.0);
  CHECK(pa_mpvpe(gt, gt) <= 1e-10);
  CHECK(pa_mpvpe(transformed(random_similarity(rng), gt), gt) <= 1e-9);
  std::vector<double> off = gt.values();
  off[3 * 42 + 2] += 1.0;
  Tensor pred = Tensor::from_vec({97, 3}, off);
  CHECK(pa_mpvpe(pred, gt) ==
        doctest::Approx(oracles::pa_mean_distance(pred.values(), gt.values()))
            .epsilon(1e-9));
}

TEST_CASE("f-score") {
  Rng rng(60);

  SUBCASE("identical clouds score 1 at any threshold") {
    Tensor a = random_cloud(rng, 30, 50.0);
    for (double thr : {0.001, 5.0, 15.0, 1000.0})
      CHECK(f_score(a, a, thr) == 1.0);
  }

  SUBCASE("clouds farther apart than the threshold score 0") {
    Tensor a = random_cloud(rng, 10, 1.0);
    std::vector<double> far = a.values();
    for (size_t i = 0; i < far.size(); i += 3) far[i] += 1000.0;
    // Unaligned: every pair is ~1000 apart.
    CHECK(f_score(a, Tensor::from_vec({10, 3}, far), 5.0, false) == 0.0);
  }

  SUBCASE("mixed 4-point clouds match the all-pairs oracle") {
    for (int trial = 0; trial < 50; ++trial) {
      Tensor a = random_cloud(rng, 4, 10.0);
      Tensor b = random_cloud(rng, 4, 10.0);
      for (double thr : {2.0, 5.0, 8.0, 15.0}) {
        CHECK(f_score(a, b, thr, false) ==
              oracles::fscore_all_pairs(a.values(), b.values(), thr));
        // Aligned flavor: same counting on oracle-aligned clouds.
        oracles::Similarity sim = oracles::horn_align(a.values(), b.values());
        Tensor moved = transformed(sim, a);
        CHECK(f_score(a, b, thr, true) ==
              doctest::Approx(oracles::fscore_all_pairs(moved.values(),
                                                        b.values(), thr))
                  .epsilon(1e-12));
      }
    }
  }

  SUBCASE("monotone in the threshold and symmetric in the arguments") {
    Tensor a = random_cloud(rng, 25, 20.0);
    std::vector<double> noisy = a.values();
    for (double& x : noisy) x += rng.uniform(-6.0, 6.0);
    Tensor b = Tensor::from_vec({25, 3}, std::move(noisy));
    double prev = -1.0;
    for (double thr : {1.0, 2.0, 5.0, 10.0, 20.0, 50.0}) {
      const double f = f_score(a, b, thr);
      CHECK(f >= prev);
      CHECK(f >= 0.0);
      CHECK(f <= 1.0);
      prev = f;
      CHECK(f_score(a, b, thr, false) == f_score(b, a, thr, false));
    }
  }

  SUBCASE("bad inputs are rejected") {
    Tensor a = random_cloud(rng, 5, 1.0);
    CHECK_THROWS_AS(f_score(a, a, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(f_score(a, a, -2.0), std::invalid_argument);
    CHECK_THROWS_AS(f_score(Tensor::zeros({0, 3}), a, 5.0),
                    std::invalid_argument);
  }
}

TEST_CASE("evaluate") {
  HandRig rig = make_synthetic_rig(3, 16);
  Dataset ds = make_dataset(4, 21, rig, 0.5);

  SUBCASE("an oracle predictor scores perfectly") {
    Predictor perfect = [&](const Sample& s) {
      HandOutput h = hand_forward(rig, s.true_params);
      return PredictedShape{h.joints3d, h.vertices};
    };
    MetricsReport r = evaluate(perfect, ds, rig);
    CHECK(r.j_err <= 1e-10);
    CHECK(r.v_err <= 1e-10);
    CHECK(r.f_at.at(5.0) == 1.0);
    CHECK(r.f_at.at(15.0) == 1.0);
    CHECK(r.n_samples == 4);
  }

  SUBCASE("aggregation is the mean of per-sample metrics") {
    Rng rng(61);
    // A deliberately wrong predictor: true shape plus fixed noise.
    std::vector<Tensor> jitters;
    for (int i = 0; i < 4; ++i) jitters.push_back(random_cloud(rng, 16, 8.0));
    int idx = 0;
    Predictor noisy = [&](const Sample& s) {
      HandOutput h = hand_forward(rig, s.true_params);
      Tensor verts = add(h.vertices, jitters[idx++ % 4]);
      return PredictedShape{h.joints3d, verts};
    };
    idx = 0;
    MetricsReport r = evaluate(noisy, ds, rig, {5.0});
    idx = 0;
    double vsum = 0.0, fsum = 0.0;
    for (const Sample& s : ds.samples) {
      HandOutput h = hand_forward(rig, s.true_params);
      Tensor verts = add(h.vertices, jitters[idx++ % 4]);
      vsum += pa_mpvpe(verts, h.vertices);
      fsum += f_score(verts, h.vertices, 5.0);
    }
    CHECK(r.v_err == vsum / 4);
    CHECK(r.f_at.at(5.0) == fsum / 4);
  }

  SUBCASE("a real model produces finite fields and parameter counts") {
    NetConfig cfg;
    cfg.channel_widths = {4, 8};
    cfg.head_dim = 8;
    Model m = init_model(cfg);
    MetricsReport r = evaluate(m, ds, rig);
    CHECK(std::isfinite(r.j_err));
    CHECK(std::isfinite(r.v_err));
    CHECK(r.j_err >= 0.0);
    for (const auto& [t, v] : r.f_at) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(r.params_total == param_count_total(m));
    CHECK(r.params_trainable == param_count(m));
    const std::string csv = metrics_csv_row(r);
    CHECK(csv.find(",") != std::string::npos);
    CHECK(metrics_csv_header(r).find("j_err_mm") == 0);
    CHECK(metrics_text(r).find("PA-MPJPE") != std::string::npos);
  }

  SUBCASE("bad thresholds are rejected") {
    Predictor perfect = [&](const Sample& s) {
      HandOutput h = hand_forward(rig, s.true_params);
      return PredictedShape{h.joints3d, h.vertices};
    };
    CHECK_THROWS_AS(evaluate(perfect, ds, rig, {5.0, -1.0}),
                    std::invalid_argument);
  }
}

TEST_CASE("bench reports parameters and positive throughput") {
  HandRig rig = make_synthetic_rig(3, 16);
  NetConfig cfg;
  cfg.channel_widths = {4, 8};
  cfg.head_dim = 8;
  cfg.input_h = 16;
  cfg.input_w = 16;
  Model m = init_model(cfg);
  // Runs must be long enough (hundreds of ms) for scheduler noise to
  // amortize, or the stability bound below is meaningless.
  BenchResult a = bench(m, rig, 200, 3000);
  CHECK(a.params_total == param_count_total(m));
  CHECK(a.throughput > 0.0);
  BenchResult b = bench(m, rig, 200, 3000);
  // Repeat measurements agree within the stability bound.
  CHECK(std::abs(a.throughput - b.throughput) <=
        0.25 * std::max(a.throughput, b.throughput));
  CHECK_THROWS_AS(bench(m, rig, 0, 0), std::invalid_argument);
}
