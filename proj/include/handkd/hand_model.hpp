#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "handkd/tensor.hpp"

namespace handkd {

/// Parametric hand: 48 axis-angle pose values (16 joints × 3, joint 0 is
/// the global orientation) and 10 shape coefficients.
struct HandParams {
  Tensor theta;  // {48}
  Tensor beta;   // {10}
};

struct HandOutput {
  Tensor vertices;  // {N_v, 3}, millimeters, model frame
  Tensor joints3d;  // {21, 3}, millimeters, model frame
};

/// Constants of the differentiable hand model: template mesh, linear shape
/// blendshapes, kinematic tree, skinning weights and keypoint regressor.
/// Immutable after construction; all tensors are plain constants.
struct HandRig {
  static constexpr int kJoints = 16;
  static constexpr int kShapes = 10;
  static constexpr int kKeypoints = 21;

  int n_v = 0;
  Tensor template_vertices;   // {n_v, 3}, mm
  Tensor shape_blendshapes;   // {kShapes, n_v, 3}, mm per unit shape coeff
  Tensor joint_regressor;     // {n_joints, n_v}, convex rows
  std::vector<int> parents;   // per joint; parents[0] == -1
  Tensor skinning_weights;    // {n_v, n_joints}, convex rows
  Tensor keypoint_regressor;  // {n_keypoints, n_v}, convex rows

  int n_joints() const { return static_cast<int>(parents.size()); }
  int n_keypoints() const { return keypoint_regressor.extent(0); }
  int n_shapes() const { return shape_blendshapes.extent(0); }

  /// Throws std::invalid_argument if any structural invariant is broken
  /// (row convexity, tree ordering, shape consistency, finiteness).
  void validate() const;
};

/// Poses the rig: shaped template from the blendshapes, rest joints from
/// the joint regressor, world transforms composed along the kinematic tree,
/// linear blend skinning relative to the rest pose, then 21 regressed
/// keypoints. Differentiable in theta and beta.
HandOutput hand_forward(const HandRig& rig, const HandParams& params);

/// Deterministic hand-like rig: vertices scattered around a wrist plus
/// five 3-bone fingers, skinning by distance softmax over the two nearest
/// bones, regressors by nearest-vertex averaging. Pure function of
/// (seed, n_v); requires n_v >= 16.
HandRig make_synthetic_rig(uint64_t seed, int n_v);

void save_rig(const HandRig& rig, const std::string& path);
HandRig load_rig(const std::string& path);

/// Content id over every rig array, independent of where the rig came
/// from; datasets record it so mismatched rig/dataset pairs are caught.
uint64_t rig_digest(const HandRig& rig);

}  // namespace handkd
