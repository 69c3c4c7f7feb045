#include "handkd/camera.hpp"

#include <stdexcept>
#include <string>

#include "handkd/common.hpp"

namespace handkd {

namespace {
constexpr double kMinDepth = 1e-3;  // mm
}

Tensor project(const Tensor& points3d, const CameraParams& cam) {
  if (points3d.ndim() != 2 || points3d.extent(1) != 3)
    throw std::invalid_argument("project: points must be N×3, got " +
                                shape_str(points3d.shape()));
  if (cam.translation.numel() != 3 || !cam.translation.all_finite())
    throw std::invalid_argument("project: camera translation must be 3 finite values");
  if (cam.focal <= 0.0)
    throw std::invalid_argument("project: focal length must be positive");

  const int n = points3d.extent(0);
  // Column extraction through constant selectors keeps the graph simple.
  Tensor x = matmul(points3d, Tensor::from_vec({3, 1}, {1, 0, 0}));
  Tensor y = matmul(points3d, Tensor::from_vec({3, 1}, {0, 1, 0}));
  Tensor z = matmul(points3d, Tensor::from_vec({3, 1}, {0, 0, 1}));
  Tensor tx = slice(cam.translation, 0, 1);
  Tensor ty = slice(cam.translation, 1, 1);
  Tensor tz = slice(cam.translation, 2, 1);

  Tensor depth = add(z, tz);
  for (int i = 0; i < n; ++i)
    if (!(depth.values()[i] > kMinDepth))
      throw NumericalError("project: effective depth " +
                           std::to_string(depth.values()[i]) +
                           " mm at point index " + std::to_string(i) +
                           " is not in front of the camera");

  Tensor u = add(mul(div(add(x, tx), depth), cam.focal), cam.image_w / 2.0);
  Tensor v = add(mul(div(add(y, ty), depth), cam.focal), cam.image_h / 2.0);
  return add(matmul(u, Tensor::from_vec({1, 2}, {1, 0})),
             matmul(v, Tensor::from_vec({1, 2}, {0, 1})));
}

}  // namespace handkd
