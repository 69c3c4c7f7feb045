#include "handkd/hand_model.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "handkd/binio.hpp"
#include "handkd/common.hpp"
#include "handkd/rng.hpp"

namespace handkd {

namespace {

constexpr uint64_t kRigStream = 0x4852494721ull;

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 lerp(const Vec3& a, const Vec3& b, double s) {
  return {a.x + s * (b.x - a.x), a.y + s * (b.y - a.y),
          a.z + s * (b.z - a.z)};
}

double point_segment_dist(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab{b.x - a.x, b.y - a.y, b.z - a.z};
  double len2 = ab.x * ab.x + ab.y * ab.y + ab.z * ab.z;
  double t = 0.0;
  if (len2 > 0.0) {
    t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y + (p.z - a.z) * ab.z) / len2;
    t = std::min(1.0, std::max(0.0, t));
  }
  Vec3 q = lerp(a, b, t);
  double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

void check_convex_rows(const Tensor& m, const char* what) {
  const int rows = m.extent(0), cols = m.extent(1);
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      double w = m.values()[static_cast<size_t>(i) * cols + j];
      if (!(w >= 0.0))
        throw std::invalid_argument(std::string(what) + ": negative weight in row " +
                                    std::to_string(i));
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw std::invalid_argument(std::string(what) + ": row " +
                                  std::to_string(i) + " sums to " +
                                  std::to_string(s));
  }
}

}  // namespace

void HandRig::validate() const {
  if (n_v <= 0) throw std::invalid_argument("rig: non-positive vertex count");
  const int nj = n_joints();
  if (nj <= 0) throw std::invalid_argument("rig: empty kinematic tree");
  if (template_vertices.shape() != Shape{n_v, 3})
    throw std::invalid_argument("rig: template shape mismatch");
  if (shape_blendshapes.ndim() != 3 || shape_blendshapes.extent(1) != n_v ||
      shape_blendshapes.extent(2) != 3)
    throw std::invalid_argument("rig: blendshape shape mismatch");
  if (joint_regressor.shape() != Shape{nj, n_v})
    throw std::invalid_argument("rig: joint regressor shape mismatch");
  if (skinning_weights.shape() != Shape{n_v, nj})
    throw std::invalid_argument("rig: skinning weight shape mismatch");
  if (keypoint_regressor.ndim() != 2 || keypoint_regressor.extent(1) != n_v)
    throw std::invalid_argument("rig: keypoint regressor shape mismatch");
  if (parents[0] != -1)
    throw std::invalid_argument("rig: joint 0 must be the root");
  for (int j = 1; j < nj; ++j)
    if (parents[j] < 0 || parents[j] >= j)
      throw std::invalid_argument(
          "rig: parents must form a tree with parent index < child index");
  for (const Tensor* t : {&template_vertices, &shape_blendshapes,
                          &joint_regressor, &skinning_weights,
                          &keypoint_regressor})
    if (!t->all_finite())
      throw std::invalid_argument("rig: non-finite constants");
  check_convex_rows(skinning_weights, "rig skinning_weights");
  check_convex_rows(joint_regressor, "rig joint_regressor");
  check_convex_rows(keypoint_regressor, "rig keypoint_regressor");
}

HandOutput hand_forward(const HandRig& rig, const HandParams& params) {
  const int nj = rig.n_joints();
  const int nv = rig.n_v;
  const int ns = rig.n_shapes();
  if (params.theta.numel() != 3 * nj)
    throw std::invalid_argument("hand_forward: theta wants " +
                                std::to_string(3 * nj) + " values, got " +
                                std::to_string(params.theta.numel()));
  if (params.beta.numel() != ns)
    throw std::invalid_argument("hand_forward: beta wants " +
                                std::to_string(ns) + " values, got " +
                                std::to_string(params.beta.numel()));
  if (!params.theta.all_finite() || !params.beta.all_finite())
    throw std::invalid_argument("hand_forward: non-finite hand parameters");

  // Shaped template: T(β) = template + Σₖ βₖ·blendshapeₖ, as one matmul.
  Tensor beta_row = reshape(params.beta, {1, ns});
  Tensor blend_mat = reshape(rig.shape_blendshapes, {ns, nv * 3});
  Tensor shaped =
      add(rig.template_vertices, reshape(matmul(beta_row, blend_mat), {nv, 3}));

  // Rest joints regressed from the shaped template.
  Tensor rest_joints = matmul(rig.joint_regressor, shaped);  // {nj, 3}

  // World transforms along the tree, kept in row-vector form: RwT[j] is the
  // transpose of the accumulated world rotation, o[j] the skinning offset
  // t_world − r_rest·RwTᵀ. Written so the rest pose is *exactly* neutral:
  // at θ=0 every RwT is the exact identity and every o is exactly zero.
  Tensor eye3 = Tensor::from_vec({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::vector<Tensor> rwt(nj), offset(nj);
  std::vector<Tensor> rest_row(nj);
  for (int j = 0; j < nj; ++j)
    rest_row[j] = reshape(slice(rest_joints, 3 * j, 3), {1, 3});
  for (int j = 0; j < nj; ++j) {
    Tensor local_t = transpose(rodrigues(slice(params.theta, 3 * j, 3)));
    if (j == 0) {
      rwt[0] = local_t;
      offset[0] = sub(rest_row[0], matmul(rest_row[0], rwt[0]));
    } else {
      int p = rig.parents[j];
      rwt[j] = matmul(local_t, rwt[p]);
      offset[j] = add(offset[p], matmul(rest_row[j], sub(rwt[p], rwt[j])));
    }
  }

  // Linear blend skinning as template + weighted per-joint displacement;
  // the displacement vanishes identically at rest.
  Tensor ones_col = Tensor::ones({nv, 1});
  Tensor posed = shaped;
  const auto& skin = rig.skinning_weights.values();
  for (int j = 0; j < nj; ++j) {
    bool any = false;
    std::vector<double> wmat(static_cast<size_t>(nv) * 3);
    for (int v = 0; v < nv; ++v) {
      double w = skin[static_cast<size_t>(v) * nj + j];
      any = any || w != 0.0;
      wmat[v * 3] = wmat[v * 3 + 1] = wmat[v * 3 + 2] = w;
    }
    if (!any) continue;  // joint influences nothing; skip the dead branch
    Tensor disp = add(matmul(shaped, sub(rwt[j], eye3)),
                      matmul(ones_col, offset[j]));
    posed = add(posed, mul(Tensor::from_vec({nv, 3}, std::move(wmat)), disp));
  }

  HandOutput out;
  out.vertices = posed;
  out.joints3d = matmul(rig.keypoint_regressor, posed);
  return out;
}

HandRig make_synthetic_rig(uint64_t seed, int n_v) {
  constexpr int nj = HandRig::kJoints;
  constexpr int ns = HandRig::kShapes;
  constexpr int nk = HandRig::kKeypoints;
  if (n_v < nj)
    throw std::invalid_argument("make_synthetic_rig: need at least " +
                                std::to_string(nj) + " vertices, got " +
                                std::to_string(n_v));
  Rng rng(mix_seeds(seed, kRigStream));

  // Skeleton: wrist at the origin, five fingers of three bones each.
  std::vector<Vec3> joints(nj);
  std::vector<int> parents(nj, -1);
  std::array<Vec3, 5> tips;
  const double spread[5] = {-0.70, -0.35, 0.0, 0.35, 0.70};
  for (int f = 0; f < 5; ++f) {
    double ang = spread[f] + rng.uniform(-0.05, 0.05);
    double dx = std::sin(ang), dy = std::cos(ang);
    double scale = rng.uniform(0.9, 1.1);
    double palm = 85.0 * scale;
    double lens[3] = {32.0 * scale, 22.0 * scale, 15.0 * scale};
    Vec3 pos{dx * palm, dy * palm, rng.uniform(-4.0, 4.0)};
    for (int b = 0; b < 3; ++b) {
      int j = 1 + f * 3 + b;
      parents[j] = (b == 0) ? 0 : j - 1;
      joints[j] = pos;
      pos = {pos.x + dx * lens[b], pos.y + dy * lens[b],
             pos.z + rng.uniform(-2.0, 2.0)};
    }
    tips[f] = pos;
  }

  // Sampling segments: one per finger bone, one per fingertip, and a palm
  // stub so the wrist joint owns some surface too.
  struct Segment {
    Vec3 a, b;
    int joint;  // which joint this piece of surface follows
  };
  std::vector<Segment> segments;
  segments.push_back({{0, 0, 0}, {0, 45.0, 0}, 0});
  for (int j = 1; j < nj; ++j)
    segments.push_back({joints[parents[j]], joints[j], j});
  for (int f = 0; f < 5; ++f)
    segments.push_back({joints[1 + f * 3 + 2], tips[f], 1 + f * 3 + 2});

  // Vertices: a point along a random segment plus isotropic scatter.
  std::vector<Vec3> verts(n_v);
  for (int v = 0; v < n_v; ++v) {
    const Segment& s = segments[rng.uniform_int(segments.size())];
    Vec3 base = lerp(s.a, s.b, rng.uniform());
    verts[v] = {base.x + 5.0 * rng.normal(), base.y + 5.0 * rng.normal(),
                base.z + 5.0 * rng.normal()};
  }
  std::vector<double> tmpl(static_cast<size_t>(n_v) * 3);
  for (int v = 0; v < n_v; ++v) {
    tmpl[v * 3] = verts[v].x;
    tmpl[v * 3 + 1] = verts[v].y;
    tmpl[v * 3 + 2] = verts[v].z;
  }

  // Blendshapes: smooth affine deformation fields, a few mm per unit
  // coefficient.
  std::vector<double> blends(static_cast<size_t>(ns) * n_v * 3);
  for (int k = 0; k < ns; ++k) {
    double lin[9], off[3];
    for (double& a : lin) a = 0.02 * rng.normal();
    for (double& b : off) b = 1.5 * rng.normal();
    for (int v = 0; v < n_v; ++v) {
      const Vec3& p = verts[v];
      for (int c = 0; c < 3; ++c)
        blends[(static_cast<size_t>(k) * n_v + v) * 3 + c] =
            lin[c * 3] * p.x + lin[c * 3 + 1] * p.y + lin[c * 3 + 2] * p.z +
            off[c];
    }
  }

  // Skinning: distance softmax over the two nearest bones, renormalized.
  const double tau = 8.0;  // mm
  std::vector<double> skin(static_cast<size_t>(n_v) * nj, 0.0);
  for (int v = 0; v < n_v; ++v) {
    std::array<double, nj> dist;
    dist.fill(1e30);
    for (const Segment& s : segments)
      dist[s.joint] =
          std::min(dist[s.joint], point_segment_dist(verts[v], s.a, s.b));
    int j1 = 0;
    for (int j = 1; j < nj; ++j)
      if (dist[j] < dist[j1]) j1 = j;
    int j2 = (j1 == 0) ? 1 : 0;
    for (int j = 0; j < nj; ++j)
      if (j != j1 && dist[j] < dist[j2]) j2 = j;
    double e1 = std::exp(-dist[j1] / tau), e2 = std::exp(-dist[j2] / tau);
    skin[static_cast<size_t>(v) * nj + j1] = e1 / (e1 + e2);
    skin[static_cast<size_t>(v) * nj + j2] = e2 / (e1 + e2);
  }

  // Regressors: equal weights over the nearest vertices of each target.
  auto nearest_row = [&](const Vec3& target, std::vector<double>& row) {
    const int k = std::min(4, n_v);
    std::vector<int> idx(n_v);
    for (int v = 0; v < n_v; ++v) idx[v] = v;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                      [&](int a, int b) {
                        auto d2 = [&](int v) {
                          double dx = verts[v].x - target.x;
                          double dy = verts[v].y - target.y;
                          double dz = verts[v].z - target.z;
                          return dx * dx + dy * dy + dz * dz;
                        };
                        double da = d2(a), db = d2(b);
                        return da < db || (da == db && a < b);
                      });
    for (int i = 0; i < k; ++i) row[idx[i]] = 1.0 / k;
  };
  std::vector<double> jreg(static_cast<size_t>(nj) * n_v, 0.0);
  for (int j = 0; j < nj; ++j) {
    std::vector<double> row(n_v, 0.0);
    nearest_row(joints[j], row);
    std::copy(row.begin(), row.end(), jreg.begin() + static_cast<size_t>(j) * n_v);
  }
  // 21 keypoints: the 16 joints followed by the 5 fingertips.
  std::vector<double> kreg(static_cast<size_t>(nk) * n_v, 0.0);
  std::copy(jreg.begin(), jreg.end(), kreg.begin());
  for (int f = 0; f < 5; ++f) {
    std::vector<double> row(n_v, 0.0);
    nearest_row(tips[f], row);
    std::copy(row.begin(), row.end(),
              kreg.begin() + static_cast<size_t>(nj + f) * n_v);
  }

  HandRig rig;
  rig.n_v = n_v;
  rig.template_vertices = Tensor::from_vec({n_v, 3}, std::move(tmpl));
  rig.shape_blendshapes = Tensor::from_vec({ns, n_v, 3}, std::move(blends));
  rig.joint_regressor = Tensor::from_vec({nj, n_v}, std::move(jreg));
  rig.parents = std::move(parents);
  rig.skinning_weights = Tensor::from_vec({n_v, nj}, std::move(skin));
  rig.keypoint_regressor = Tensor::from_vec({nk, n_v}, std::move(kreg));
  rig.validate();
  return rig;
}

void save_rig(const HandRig& rig, const std::string& path) {
  BinWriter w(path);
  w.magic("HKDR");
  w.u32(1);
  w.u32(static_cast<uint32_t>(rig.n_v));
  w.u32(static_cast<uint32_t>(rig.n_joints()));
  w.section("template", rig.template_vertices.values());
  w.section("blendshapes", rig.shape_blendshapes.values());
  w.section("joint_regressor", rig.joint_regressor.values());
  std::vector<double> par(rig.parents.begin(), rig.parents.end());
  w.section("parents", par);
  w.section("skinning_weights", rig.skinning_weights.values());
  w.section("keypoint_regressor", rig.keypoint_regressor.values());
  w.close();
}

uint64_t rig_digest(const HandRig& rig) {
  std::vector<double> all;
  all.push_back(rig.n_v);
  all.push_back(rig.n_joints());
  auto append = [&](const std::vector<double>& v) {
    all.insert(all.end(), v.begin(), v.end());
  };
  append(rig.template_vertices.values());
  append(rig.shape_blendshapes.values());
  append(rig.joint_regressor.values());
  all.insert(all.end(), rig.parents.begin(), rig.parents.end());
  append(rig.skinning_weights.values());
  append(rig.keypoint_regressor.values());
  return bytes_digest_u64(all.data(), all.size() * sizeof(double));
}

HandRig load_rig(const std::string& path) {
  BinReader r(path);
  r.magic("HKDR");
  uint32_t version = r.u32("rig format version");
  if (version != 1)
    throw FormatError("'" + path + "': unsupported rig format version " +
                      std::to_string(version));
  int nv = static_cast<int>(r.u32("vertex count"));
  int nj = static_cast<int>(r.u32("joint count"));
  if (nv <= 0 || nj <= 0 || nv > 1000000 || nj > 1024)
    throw FormatError("'" + path + "': implausible rig dimensions");

  HandRig rig;
  rig.n_v = nv;
  auto expect = [&](const char* name, size_t count) {
    auto v = r.section(name);
    if (v.size() != count)
      throw FormatError("'" + path + "': section '" + name + "' has " +
                        std::to_string(v.size()) + " values, expected " +
                        std::to_string(count));
    return v;
  };
  rig.template_vertices =
      Tensor::from_vec({nv, 3}, expect("template", static_cast<size_t>(nv) * 3));
  auto blends = expect("blendshapes",
                       static_cast<size_t>(HandRig::kShapes) * nv * 3);
  rig.shape_blendshapes =
      Tensor::from_vec({HandRig::kShapes, nv, 3}, std::move(blends));
  rig.joint_regressor = Tensor::from_vec(
      {nj, nv}, expect("joint_regressor", static_cast<size_t>(nj) * nv));
  auto par = expect("parents", nj);
  rig.parents.resize(nj);
  for (int j = 0; j < nj; ++j) {
    double p = par[j];
    if (p != std::floor(p) || p < -1 || p >= nj)
      throw FormatError("'" + path +
                        "': section 'parents' holds a non-index value");
    rig.parents[j] = static_cast<int>(p);
  }
  rig.skinning_weights = Tensor::from_vec(
      {nv, nj}, expect("skinning_weights", static_cast<size_t>(nv) * nj));
  rig.keypoint_regressor = Tensor::from_vec(
      {HandRig::kKeypoints, nv},
      expect("keypoint_regressor",
             static_cast<size_t>(HandRig::kKeypoints) * nv));
  try {
    rig.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
  return rig;
}

}  // namespace handkd
