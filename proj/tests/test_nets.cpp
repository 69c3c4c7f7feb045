#include "handkd/nets.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "handkd/binio.hpp"
#include "handkd/rng.hpp"

using namespace handkd;

namespace {

NetConfig tiny_config(std::uint64_t seed) {
  NetConfig c;
  c.channel_widths = {3, 4};
  c.head_dim = 5;
  c.input_channels = 2;
  c.input_h = 8;
  c.input_w = 8;
  c.seed = seed;
  return c;
}

Tensor random_image(Rng& rng, const NetConfig& cfg) {
  std::vector<double> v(static_cast<size_t>(cfg.input_channels) * cfg.input_h *
                        cfg.input_w);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor::from_vec({cfg.input_channels, cfg.input_h, cfg.input_w},
                          std::move(v));
}

// Plain-loop reference for the attention head: tokens from the feature
// map, scaled dot-product attention with one query, 2-layer tanh MLP.
std::vector<double> head_oracle(const Model& m, const Tensor& f) {
  const int c = f.extent(0), hw = f.extent(1) * f.extent(2);
  const int d = m.config.head_dim;
  const auto& fv = f.values();
  const auto& wk = m.attn_key.values();    // {c, d}
  const auto& q = m.attn_query.values();   // {d}
  auto token = [&](int t, int ch) { return fv[ch * hw + t]; };

  std::vector<double> logits(hw, 0.0);
  for (int t = 0; t < hw; ++t) {
    for (int j = 0; j < d; ++j) {
      double key_j = 0.0;
      for (int ch = 0; ch < c; ++ch) key_j += token(t, ch) * wk[ch * d + j];
      logits[t] += key_j * q[j];
    }
    logits[t] /= std::sqrt(static_cast<double>(d));
  }
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double z = 0.0;
  std::vector<double> attn(hw);
  for (int t = 0; t < hw; ++t) z += (attn[t] = std::exp(logits[t] - mx));
  for (double& a : attn) a /= z;

  std::vector<double> attended(c, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int t = 0; t < hw; ++t) attended[ch] += attn[t] * token(t, ch);

  const auto& w1 = m.mlp_w1.values();  // {c, d}
  const auto& b1 = m.mlp_b1.values();  // {1, d}
  std::vector<double> h(d);
  for (int j = 0; j < d; ++j) {
    double s = b1[j];
    for (int ch = 0; ch < c; ++ch) s += attended[ch] * w1[ch * d + j];
    h[j] = std::tanh(s);
  }
  const auto& w2 = m.mlp_w2.values();  // {d, 61}
  const auto& b2 = m.mlp_b2.values();  // {1, 61}
  std::vector<double> out(kHeadOutputs);
  for (int j = 0; j < kHeadOutputs; ++j) {
    double s = b2[j];
    for (int k = 0; k < d; ++k) s += h[k] * w2[k * kHeadOutputs + j];
    out[j] = s;
  }
  return out;
}

}  // namespace

TEST_CASE("identical config gives bit-identical parameters, new seed differs") {
  Model a = init_model(tiny_config(5));
  Model b = init_model(tiny_config(5));
  Model c = init_model(tiny_config(6));
  CHECK(param_digest(a) == param_digest(b));
  CHECK(param_digest(a) != param_digest(c));
}

TEST_CASE("parameter counts follow the layer formulas") {
  NetConfig cfg;
  cfg.channel_widths = {4};
  cfg.head_dim = 3;
  cfg.input_channels = 2;
  cfg.input_h = 4;
  cfg.input_w = 4;
  Model m = init_model(cfg);
  // One 3x3 conv, 2 -> 4 channels, with bias.
  CHECK(m.stages[0].weight.numel() + m.stages[0].bias.numel() == 2 * 4 * 9 + 4);
  // Whole model: conv + key + query + two MLP layers.
  const long long expect = (2 * 4 * 9 + 4) + (4 * 3) + 3 + (4 * 3 + 3) +
                           (3 * 61 + 61);
  CHECK(param_count(m) == expect);
  CHECK(param_count_total(m) == expect);
}

TEST_CASE("teacher interior conv layers are 16x the small student's") {
  Model t = init_model(teacher_config(0));
  Model s = init_model(student_config("small", 0));
  for (int i : {1, 2})
    CHECK(t.stages[i].weight.numel() == 16 * s.stages[i].weight.numel());
  // Whole-model budget used by the efficiency gate downstream.
  CHECK(param_count(s) * 100 <= param_count(t) * 35);
  CHECK(param_count(init_model(student_config("large", 0))) * 100 <=
        param_count(t) * 35);
}

TEST_CASE("malformed configs are rejected") {
  NetConfig c = tiny_config(0);
  c.head_dim = 0;
  CHECK_THROWS_AS(init_model(c), std::invalid_argument);
  c = tiny_config(0);
  c.channel_widths.clear();
  CHECK_THROWS_AS(init_model(c), std::invalid_argument);
  c = tiny_config(0);
  c.channel_widths[1] = 0;
  CHECK_THROWS_AS(init_model(c), std::invalid_argument);
  CHECK_THROWS_AS(student_config("medium", 0), std::invalid_argument);
}

TEST_CASE("zero image with zero biases maps to an exactly zero feature map") {
  Model m = init_model(tiny_config(2));
  for (auto& st : m.stages)
    std::fill(st.bias.raw_data().begin(), st.bias.raw_data().end(), 0.0);
  Tensor f = forward_backbone(
      m, Tensor::zeros({m.config.input_channels, 8, 8}));
  for (double v : f.values()) CHECK(v == 0.0);
}

TEST_CASE("stride arithmetic: widths [8,16] on 64x64 gives a 16x16x16 map") {
  NetConfig cfg;
  cfg.channel_widths = {8, 16};
  cfg.head_dim = 8;
  cfg.input_channels = 21;
  Model m = init_model(cfg);
  Tensor f = forward_backbone(m, Tensor::zeros({21, 64, 64}));
  CHECK(f.shape() == Shape{16, 16, 16});
}

TEST_CASE("default configs produce aligned 8x8 feature maps") {
  for (const Model& m :
       {init_model(teacher_config(0)), init_model(student_config("small", 0)),
        init_model(student_config("large", 0))}) {
    Tensor f = forward_backbone(m, Tensor::zeros({21, 64, 64}));
    CHECK(f.extent(0) == m.config.channel_widths.back());
    CHECK(f.extent(1) == 8);
    CHECK(f.extent(2) == 8);
  }
}

TEST_CASE("repeated forwards are bitwise identical") {
  Model m = init_model(tiny_config(3));
  Rng rng(17);
  Tensor img = random_image(rng, m.config);
  HandRig rig = make_synthetic_rig(9, 18);
  ForwardResult a = forward_full(m, img, rig);
  ForwardResult b = forward_full(m, img, rig);
  CHECK(a.feature_map.values() == b.feature_map.values());
  CHECK(a.pred.k2d.values() == b.pred.k2d.values());
  CHECK(a.vertices.values() == b.vertices.values());
}

TEST_CASE("head matches a plain-loop attention oracle") {
  Model m = init_model(tiny_config(4));
  Rng rng(23);
  HandRig rig = make_synthetic_rig(9, 18);
  Tensor img = random_image(rng, m.config);
  Tensor f = forward_backbone(m, img);

  SUBCASE("generic weights") {}
  SUBCASE("zero query and key weights: attention is uniform, the attended "
          "vector is the token mean") {
    std::fill(m.attn_key.raw_data().begin(), m.attn_key.raw_data().end(), 0.0);
    std::fill(m.attn_query.raw_data().begin(), m.attn_query.raw_data().end(),
              0.0);
  }

  HeadResult r = forward_head(m, f, rig);
  std::vector<double> want = head_oracle(m, f);
  for (int i = 0; i < 48; ++i)
    CHECK(r.pred.theta.values()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  for (int i = 0; i < 10; ++i)
    CHECK(r.pred.beta.values()[i] ==
          doctest::Approx(want[48 + i]).epsilon(1e-12));
  for (int i = 0; i < 3; ++i)
    CHECK(r.pred.pi.translation.values()[i] ==
          doctest::Approx(want[58 + i] + (i == 2 ? 600.0 : 0.0))
              .epsilon(1e-12));
}

TEST_CASE("attention weights form a probability distribution") {
  Model m = init_model(tiny_config(8));
  Rng rng(29);
  HandRig rig = make_synthetic_rig(9, 18);
  for (int trial = 0; trial < 5; ++trial) {
    ForwardResult fr = forward_full(m, random_image(rng, m.config), rig);
    double sum = 0.0;
    for (double a : fr.attention.values()) {
      CHECK(a >= 0.0);
      sum += a;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("predicted 3D keypoints are the hand model's joints for (theta, beta)") {
  Model m = init_model(tiny_config(12));
  Rng rng(31);
  HandRig rig = make_synthetic_rig(9, 18);
  ForwardResult fr = forward_full(m, random_image(rng, m.config), rig);
  HandOutput again = hand_forward(
      rig, {fr.pred.theta.detach(), fr.pred.beta.detach()});
  for (int i = 0; i < fr.pred.k3d.numel(); ++i)
    CHECK(std::abs(fr.pred.k3d.values()[i] - again.joints3d.values()[i]) <=
          1e-12);
}

TEST_CASE("beta outputs start damped relative to pose outputs") {
  Model m = init_model(teacher_config(0));
  const auto& w2 = m.mlp_w2.values();
  const double bound = 1.0 / std::sqrt(128.0);
  double max_beta = 0.0, max_theta = 0.0;
  for (int r = 0; r < 128; ++r) {
    for (int j = 48; j < 58; ++j)
      max_beta = std::max(max_beta, std::abs(w2[r * kHeadOutputs + j]));
    for (int j = 0; j < 48; ++j)
      max_theta = std::max(max_theta, std::abs(w2[r * kHeadOutputs + j]));
  }
  CHECK(max_beta <= 0.1 * bound + 1e-15);
  CHECK(max_theta > 0.1 * bound);  // undamped columns keep the full range
}

TEST_CASE("gradients of the distillation objective match finite differences "
          "for every trainable scalar") {
  NetConfig scfg = tiny_config(21);
  NetConfig tcfg = tiny_config(22);
  tcfg.channel_widths = {4, 6};
  tcfg.head_dim = 6;
  HandRig rig = make_synthetic_rig(9, 18);
  Rng rng(37);
  Tensor img = random_image(rng, scfg);

  // Fixed teacher artifacts.
  Model teacher = init_model(tcfg);
  ForwardResult tfr = forward_full(teacher, img, rig);
  Prediction tpred;
  tpred.k3d = tfr.pred.k3d.detach();
  tpred.k2d = tfr.pred.k2d.detach();
  tpred.theta = tfr.pred.theta.detach();
  tpred.beta = tfr.pred.beta.detach();
  Tensor tfeat = tfr.feature_map.detach();

  GroundTruth gt;
  gt.mode = AnnotationMode::kFull3d;
  gt.k3d = add(tpred.k3d, 1.0);
  gt.k2d = add(tpred.k2d, 2.0);
  gt.mano_params = add(concat({tpred.theta, tpred.beta}), 0.05);

  const int cs = scfg.channel_widths.back(), ct = tcfg.channel_widths.back();
  Model shapes = init_model(scfg);
  const long long n_model = param_count(shapes);
  const int n_all = static_cast<int>(n_model) + cs * ct + cs;

  auto f = [&](const Tensor& x) {
    Model s = init_model(scfg);
    int off = 0;
    auto take = [&](Tensor& dst) {
      const Shape sh = dst.shape();
      const int n = dst.numel();
      dst = reshape(slice(x, off, n), sh);
      off += n;
    };
    for (auto& st : s.stages) {
      take(st.weight);
      take(st.bias);
    }
    take(s.attn_key);
    take(s.attn_query);
    take(s.mlp_w1);
    take(s.mlp_b1);
    take(s.mlp_w2);
    take(s.mlp_b2);
    KDConfig kcfg;
    kcfg.mode = KDMode::kCombined;
    kcfg.lambda_kd = 0.5;
    kcfg.gamma_fd = 6.0;
    kcfg.phi_weights = reshape(slice(x, off, cs * ct), {cs, ct});
    off += cs * ct;
    kcfg.phi_bias = slice(x, off, cs);
    ForwardResult fr = forward_full(s, img, rig);
    return total_loss(kcfg, fr.pred, &tpred, &fr.feature_map, &tfeat, gt);
  };

  std::vector<double> x0;
  for (const NamedParam& p : named_params(shapes)) {
    const auto& v = p.tensor.values();
    x0.insert(x0.end(), v.begin(), v.end());
  }
  for (int i = 0; i < cs * ct + cs; ++i) x0.push_back(rng.uniform(-0.5, 0.5));
  REQUIRE(static_cast<int>(x0.size()) == n_all);
  auto r = finite_diff_check(f, Tensor::from_vec({n_all}, x0), 1e-5, 1e-6);
  CHECK_MESSAGE(r.pass, r.message);
}

TEST_CASE("frozen models track no gradients and count zero trainables") {
  Model m = init_model(tiny_config(15));
  const long long total = param_count_total(m);
  CHECK(param_count(m) == total);
  freeze(m);
  CHECK(m.frozen);
  CHECK(param_count(m) == 0);
  CHECK(param_count_total(m) == total);

  Rng rng(41);
  HandRig rig = make_synthetic_rig(9, 18);
  const std::string before = param_digest(m);
  ForwardResult fr = forward_full(m, random_image(rng, m.config), rig);
  CHECK_FALSE(fr.feature_map.requires_grad());
  CHECK_FALSE(fr.pred.k2d.requires_grad());
  CHECK(param_digest(m) == before);
}

TEST_CASE("model files round-trip") {
  const std::string path = "test_model.hkdm";
  Model m = init_model(tiny_config(77));
  // Perturb away from init so the file carries "trained" state.
  m.mlp_b2.raw_data()[0] = 3.25;
  save_model(m, path);
  Model back = load_model(path);
  CHECK(param_digest(back) == param_digest(m));
  CHECK(back.config.channel_widths == m.config.channel_widths);
  CHECK(back.config.head_dim == m.config.head_dim);
  CHECK(back.config.seed == m.config.seed);
  CHECK_FALSE(back.frozen);

  const std::string path2 = "test_model_2.hkdm";
  save_model(back, path2);
  CHECK(file_digest(path) == file_digest(path2));  // save -> load -> save

  freeze(m);
  save_model(m, path2);
  Model frozen_back = load_model(path2);
  CHECK(frozen_back.frozen);
  CHECK(param_count(frozen_back) == 0);
  CHECK_FALSE(frozen_back.attn_key.requires_grad());

  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("corrupt model files are rejected with descriptive errors") {
  const std::string path = "test_model_bad.hkdm";
  Model m = init_model(tiny_config(78));
  save_model(m, path);

  SUBCASE("wrong magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  SUBCASE("unsupported version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    char v = 9;
    f.write(&v, 1);
    f.close();
    CHECK_THROWS_WITH_AS(load_model(path),
                         doctest::Contains("version"), FormatError);
  }
  SUBCASE("truncated payload") {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
    out.close();
    CHECK_THROWS_AS(load_model(path), FormatError);
  }
  SUBCASE("trailing garbage") {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f.write("zz", 2);
    f.close();
    CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("trailing"),
                         FormatError);
  }
  std::remove(path.c_str());
}

TEST_CASE("malformed inputs to the forwards are rejected") {
  Model m = init_model(tiny_config(80));
  HandRig rig = make_synthetic_rig(9, 18);
  CHECK_THROWS_AS(forward_backbone(m, Tensor::zeros({2, 8, 9})),
                  std::invalid_argument);
  CHECK_THROWS_AS(forward_backbone(m, Tensor::zeros({3, 8, 8})),
                  std::invalid_argument);
  CHECK_THROWS_AS(forward_head(m, Tensor::zeros({7, 2, 2}), rig),
                  std::invalid_argument);
}
