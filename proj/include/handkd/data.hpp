#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "handkd/camera.hpp"
#include "handkd/hand_model.hpp"
#include "handkd/losses.hpp"
#include "handkd/rng.hpp"

namespace handkd {

/// Dataset images are 21-channel keypoint heatmaps at this fixed size
/// (one channel per keypoint; the file format relies on these).
inline constexpr int kImageSize = 64;
inline constexpr int kImageChannels = 21;

struct Sample {
  Tensor image;  ///< {21, 64, 64}, values in [0, 1 + 4·noise_std]
  GroundTruth gt;
  HandParams true_params;  ///< always kept, even when gt withholds 3D
  CameraParams true_cam;
};

struct Dataset {
  std::vector<Sample> samples;
  std::uint64_t seed = 0;
  std::uint64_t rig_id = 0;  ///< rig_digest() of the generating rig
  double frac_2d_only = 0.0;
  double sigma = 2.0;
  double noise_std = 0.05;

  int size() const { return static_cast<int>(samples.size()); }
};

/// Library defaults for generated corpora.
inline constexpr int kDefaultTrainSize = 2000;
inline constexpr int kDefaultEvalSize = 500;
inline constexpr double kDefaultSigma = 2.0;
inline constexpr double kDefaultNoiseStd = 0.05;
inline constexpr double kDefaultFrac2dOnly = 0.3;

struct DrawnSample {
  HandParams params;
  CameraParams cam;
  HandOutput hand;  ///< forward pass at the drawn parameters
  Tensor k2d;       ///< {21, 2} projected keypoints
};

/// Draws hand pose (joint angles uniform ±0.6 rad, global orientation
/// uniform ±π/4), shape (standard normal clipped to ±2), and camera
/// translation (z in [400, 800] mm, x/y in ±50 mm), then runs the model
/// and projection. Redraws when a keypoint lands behind the camera;
/// after 100 failed attempts throws NumericalError.
DrawnSample sample_gt(Rng& rng, const HandRig& rig);

/// Renders one Gaussian heatmap channel per keypoint (peak 1 at the
/// keypoint, std sigma pixels) plus clamped additive noise: noise draws
/// beyond ±4·noise_std are clipped and pixels floor at 0.
Tensor render_input(const Tensor& k2d, int image_size, double sigma,
                    double noise_std, Rng& rng);

/// Generates n samples with per-sample seeds mixed from `seed`; the
/// first ⌈n·frac_2d_only⌉ withhold 3D annotations. Deterministic in
/// (seed, n, rig, frac_2d_only, sigma, noise_std).
Dataset make_dataset(int n, std::uint64_t seed, const HandRig& rig,
                     double frac_2d_only, double sigma = kDefaultSigma,
                     double noise_std = kDefaultNoiseStd);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace handkd
