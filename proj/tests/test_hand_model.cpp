#include "handkd/hand_model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "handkd/common.hpp"
#include "handkd/rng.hpp"
#include "oracles.hpp"

using namespace handkd;

namespace {

// Small hand-built rig: 5 vertices, a 3-joint chain, 2 blendshapes.
struct ToyRig {
  HandRig rig;
  oracles::LbsRig oracle;
};

ToyRig make_toy_rig(uint64_t seed) {
  Rng rng(seed);
  const int nv = 5, nj = 3, ns = 2, nk = 4;
  oracles::LbsRig o;
  o.nv = nv;
  o.nj = nj;
  o.ns = ns;
  o.nk = nk;
  o.parents = {-1, 0, 1};
  o.tmpl.resize(nv * 3);
  for (double& x : o.tmpl) x = rng.uniform(-60.0, 60.0);
  o.blends.resize(ns * nv * 3);
  for (double& x : o.blends) x = rng.uniform(-3.0, 3.0);
  auto convex_rows = [&](int rows, int cols) {
    std::vector<double> m(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < cols; ++j) {
        m[i * cols + j] = rng.uniform(0.05, 1.0);
        s += m[i * cols + j];
      }
      for (int j = 0; j < cols; ++j) m[i * cols + j] /= s;
    }
    return m;
  };
  o.jreg = convex_rows(nj, nv);
  o.skin = convex_rows(nv, nj);
  o.kreg = convex_rows(nk, nv);

  ToyRig t;
  t.oracle = o;
  t.rig.n_v = nv;
  t.rig.template_vertices = Tensor::from_vec({nv, 3}, o.tmpl);
  t.rig.shape_blendshapes = Tensor::from_vec({ns, nv, 3}, o.blends);
  t.rig.joint_regressor = Tensor::from_vec({nj, nv}, o.jreg);
  t.rig.parents = o.parents;
  t.rig.skinning_weights = Tensor::from_vec({nv, nj}, o.skin);
  t.rig.keypoint_regressor = Tensor::from_vec({nk, nv}, o.kreg);
  t.rig.validate();
  return t;
}

HandParams zero_params(const HandRig& rig) {
  return {Tensor::zeros({3 * rig.n_joints()}),
          Tensor::zeros({rig.n_shapes()})};
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("rest pose returns the template bit-exactly") {
  HandRig rig = make_synthetic_rig(3, 33);
  HandOutput out = hand_forward(rig, zero_params(rig));
  REQUIRE(out.vertices.shape() == Shape{33, 3});
  for (int i = 0; i < out.vertices.numel(); ++i)
    CHECK(out.vertices.values()[i] == rig.template_vertices.values()[i]);
}

TEST_CASE("one-hot shape coefficient adds exactly one blendshape") {
  HandRig rig = make_synthetic_rig(5, 24);
  std::vector<double> beta(10, 0.0);
  beta[1] = 1.0;
  HandOutput out = hand_forward(
      rig, {Tensor::zeros({48}), Tensor::from_vec({10}, beta)});
  const auto& tmpl = rig.template_vertices.values();
  const auto& blends = rig.shape_blendshapes.values();
  const int stride = 24 * 3;
  for (int i = 0; i < stride; ++i)
    CHECK(out.vertices.values()[i] == tmpl[i] + blends[stride + i]);
}

TEST_CASE("forward is affine in the shape coefficients at rest") {
  HandRig rig = make_synthetic_rig(9, 20);
  Rng rng(100);
  std::vector<double> b1(10), b2(10);
  for (double& x : b1) x = rng.uniform(-2.0, 2.0);
  for (double& x : b2) x = rng.uniform(-2.0, 2.0);
  auto run = [&](const std::vector<double>& b) {
    return hand_forward(rig, {Tensor::zeros({48}), Tensor::from_vec({10}, b)})
        .vertices.values();
  };
  auto v1 = run(b1), v2 = run(b2);
  std::vector<double> mid(10);
  for (int i = 0; i < 10; ++i) mid[i] = 0.5 * (b1[i] + b2[i]);
  auto vm = run(mid);
  for (size_t i = 0; i < vm.size(); ++i)
    CHECK(vm[i] == doctest::Approx(0.5 * (v1[i] + v2[i])).epsilon(1e-12));
}

TEST_CASE("global rotation pivots the whole hand about the root joint") {
  HandRig rig = make_synthetic_rig(11, 40);
  HandOutput rest = hand_forward(rig, zero_params(rig));
  // Root rest position = joint regressor row 0 · template.
  double r0[3] = {0, 0, 0};
  for (int v = 0; v < rig.n_v; ++v)
    for (int c = 0; c < 3; ++c)
      r0[c] += rig.joint_regressor.values()[v] *
               rig.template_vertices.values()[v * 3 + c];
  double g[3] = {0.4, -0.7, 0.25};
  double rot[9];
  oracles::rodrigues_exp(g, rot);
  std::vector<double> theta(48, 0.0);
  theta[0] = g[0];
  theta[1] = g[1];
  theta[2] = g[2];
  HandOutput out =
      hand_forward(rig, {Tensor::from_vec({48}, theta), Tensor::zeros({10})});
  for (int v = 0; v < rig.n_v; ++v) {
    for (int i = 0; i < 3; ++i) {
      double e = r0[i];
      for (int k = 0; k < 3; ++k)
        e += rot[i * 3 + k] * (rest.vertices.values()[v * 3 + k] - r0[k]);
      CHECK(std::abs(out.vertices.values()[v * 3 + i] - e) <= 1e-10);
    }
  }
  for (int j = 0; j < 21; ++j) {
    for (int i = 0; i < 3; ++i) {
      double e = r0[i];
      for (int k = 0; k < 3; ++k)
        e += rot[i * 3 + k] * (rest.joints3d.values()[j * 3 + k] - r0[k]);
      CHECK(std::abs(out.joints3d.values()[j * 3 + i] - e) <= 1e-10);
    }
  }
}

TEST_CASE("keypoints are exactly the regressed posed vertices") {
  HandRig rig = make_synthetic_rig(13, 30);
  Rng rng(200);
  std::vector<double> theta(48), beta(10);
  for (double& x : theta) x = rng.uniform(-0.6, 0.6);
  for (double& x : beta) x = rng.uniform(-2.0, 2.0);
  HandOutput out = hand_forward(
      rig, {Tensor::from_vec({48}, theta), Tensor::from_vec({10}, beta)});
  Tensor again = matmul(rig.keypoint_regressor, out.vertices);
  for (int i = 0; i < again.numel(); ++i)
    CHECK(std::abs(again.values()[i] - out.joints3d.values()[i]) <= 1e-12);
}

TEST_CASE("posed output matches the brute-force skinning reference") {
  Rng rng(300);
  for (int trial = 0; trial < 100; ++trial) {
    ToyRig toy = make_toy_rig(1000 + trial);
    std::vector<double> theta(9), beta(2);
    for (double& x : theta) x = rng.uniform(-1.5, 1.5);
    for (double& x : beta) x = rng.uniform(-2.0, 2.0);
    HandOutput out = hand_forward(
        toy.rig, {Tensor::from_vec({9}, theta), Tensor::from_vec({2}, beta)});
    auto ref = oracles::lbs_brute_force(toy.oracle, theta, beta);
    for (int i = 0; i < out.vertices.numel(); ++i)
      CHECK(std::abs(out.vertices.values()[i] - ref.verts[i]) <= 1e-12);
    for (int i = 0; i < out.joints3d.numel(); ++i)
      CHECK(std::abs(out.joints3d.values()[i] - ref.joints[i]) <= 1e-12);
  }
}

TEST_CASE("pose and shape gradients agree with finite differences") {
  ToyRig toy = make_toy_rig(77);
  Rng rng(400);
  std::vector<double> target(toy.oracle.nk * 3);
  for (double& x : target) x = rng.uniform(-50.0, 50.0);
  Tensor target_t = Tensor::from_vec({toy.oracle.nk, 3}, target);
  auto f = [&](const Tensor& x) {
    HandParams p{slice(x, 0, 9), slice(x, 9, 2)};
    HandOutput out = hand_forward(toy.rig, p);
    return mul(sq_l2(out.joints3d, target_t), 1.0 / (toy.oracle.nk * 3));
  };
  std::vector<double> x0(11);
  for (double& x : x0) x = rng.uniform(-0.8, 0.8);
  auto r = finite_diff_check(f, Tensor::from_vec({11}, x0), 1e-5, 1e-6);
  CHECK_MESSAGE(r.pass, r.message);
}

TEST_CASE("synthetic rig generation is deterministic and seed-sensitive") {
  HandRig a = make_synthetic_rig(7, 97);
  HandRig b = make_synthetic_rig(7, 97);
  CHECK(a.template_vertices.values() == b.template_vertices.values());
  CHECK(a.shape_blendshapes.values() == b.shape_blendshapes.values());
  CHECK(a.joint_regressor.values() == b.joint_regressor.values());
  CHECK(a.parents == b.parents);
  CHECK(a.skinning_weights.values() == b.skinning_weights.values());
  CHECK(a.keypoint_regressor.values() == b.keypoint_regressor.values());
  HandRig c = make_synthetic_rig(8, 97);
  CHECK(a.template_vertices.values() != c.template_vertices.values());
}

TEST_CASE("synthetic rigs satisfy every structural invariant") {
  for (uint64_t seed : {0ull, 1ull, 7ull, 42ull}) {
    HandRig rig = make_synthetic_rig(seed, 97);
    CHECK_NOTHROW(rig.validate());
    CHECK(rig.n_joints() == 16);
    CHECK(rig.n_keypoints() == 21);
    CHECK(rig.parents[0] == -1);
  }
  CHECK_THROWS_AS(make_synthetic_rig(1, 10), std::invalid_argument);
}

TEST_CASE("non-finite parameters are rejected") {
  HandRig rig = make_synthetic_rig(1, 20);
  std::vector<double> theta(48, 0.0);
  theta[5] = std::nan("");
  CHECK_THROWS_AS(
      hand_forward(rig, {Tensor::from_vec({48}, theta), Tensor::zeros({10})}),
      std::invalid_argument);
  CHECK_THROWS_AS(
      hand_forward(rig, {Tensor::zeros({48}), Tensor::zeros({9})}),
      std::invalid_argument);
}

TEST_CASE("rig files round-trip bit-exactly") {
  auto path = temp_file("rig_roundtrip.hkdr");
  HandRig rig = make_synthetic_rig(21, 97);
  save_rig(rig, path.string());
  HandRig back = load_rig(path.string());
  CHECK(back.n_v == rig.n_v);
  CHECK(back.parents == rig.parents);
  CHECK(back.template_vertices.values() == rig.template_vertices.values());
  CHECK(back.shape_blendshapes.values() == rig.shape_blendshapes.values());
  CHECK(back.joint_regressor.values() == rig.joint_regressor.values());
  CHECK(back.skinning_weights.values() == rig.skinning_weights.values());
  CHECK(back.keypoint_regressor.values() == rig.keypoint_regressor.values());
  std::filesystem::remove(path);
}

TEST_CASE("truncated rig file names the section that is cut off") {
  auto path = temp_file("rig_trunc.hkdr");
  save_rig(make_synthetic_rig(2, 30), path.string());
  // Cut into the trailing keypoint_regressor payload.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 64);
  CHECK_THROWS_WITH_AS(load_rig(path.string()),
                       doctest::Contains("keypoint_regressor"), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("wrong magic and wrong version are rejected") {
  auto path = temp_file("rig_magic.hkdr");
  save_rig(make_synthetic_rig(2, 20), path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOPE", 4);
  }
  CHECK_THROWS_AS(load_rig(path.string()), FormatError);
  save_rig(make_synthetic_rig(2, 20), path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    char v2[4] = {2, 0, 0, 0};
    f.write(v2, 4);
  }
  CHECK_THROWS_WITH_AS(load_rig(path.string()), doctest::Contains("version"),
                       FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("corrupted skinning payload is rejected by the load validator") {
  auto path = temp_file("rig_corrupt.hkdr");
  HandRig rig = make_synthetic_rig(4, 20);
  save_rig(rig, path.string());
  // Blow up the exponent byte of the last skinning weight: convexity breaks.
  auto size = std::filesystem::file_size(path);
  const std::streamoff kp_section =
      2 + 18 + 8 + 21 * 20 * 8;  // name-len, "keypoint_regressor", count, data
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(size) - kp_section - 1);
  char junk = 0x7f;
  f.write(&junk, 1);
  f.close();
  CHECK_THROWS_AS(load_rig(path.string()), FormatError);
  std::filesystem::remove(path);
}
