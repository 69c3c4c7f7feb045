#pragma once

#include "handkd/tensor.hpp"

namespace handkd {

/// Full-perspective pinhole: fixed focal length in pixels, principal point
/// at the image center, regressed translation in millimeters.
struct CameraParams {
  Tensor translation;  // {3}, mm
  double focal = 1000.0;
  int image_h = 64;
  int image_w = 64;
};

/// Projects N×3 model-frame points (mm) to N×2 pixel coordinates:
/// u = f·(x+tx)/(z+tz) + W/2, v = f·(y+ty)/(z+tz) + H/2.
/// Differentiable in both the points and the translation. Throws
/// NumericalError naming the first point whose effective depth z+tz
/// drops to 1e-3 mm or below.
Tensor project(const Tensor& points3d, const CameraParams& cam);

}  // namespace handkd
