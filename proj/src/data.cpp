#include "handkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "handkd/binio.hpp"

namespace handkd {

namespace {

constexpr char kDatasetMagic[4] = {'H', 'K', 'D', 'D'};
constexpr uint32_t kDatasetVersion = 1;
constexpr uint64_t kMaxSamples = 10'000'000;

constexpr int kThetaDim = 48;
constexpr int kBetaDim = 10;
constexpr int kK2dDim = kImageChannels * 2;
constexpr int kK3dDim = kImageChannels * 3;
constexpr int kManoDim = kThetaDim + kBetaDim;
constexpr int kImageDim = kImageChannels * kImageSize * kImageSize;

void require_shape(const Tensor& t, const Shape& want, const char* what) {
  if (!t.defined() || t.shape() != want)
    throw std::invalid_argument(std::string("save_dataset: ") + what +
                                " has shape " +
                                (t.defined() ? shape_str(t.shape()) : "none") +
                                ", expected " + shape_str(want));
}

}  // namespace

DrawnSample sample_gt(Rng& rng, const HandRig& rig) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<double> theta(kThetaDim);
    for (int i = 0; i < 3; ++i)
      theta[i] = rng.uniform(-std::numbers::pi / 4, std::numbers::pi / 4);
    for (int i = 3; i < kThetaDim; ++i) theta[i] = rng.uniform(-0.6, 0.6);
    std::vector<double> beta(kBetaDim);
    for (double& b : beta) b = std::clamp(rng.normal(), -2.0, 2.0);
    const double tx = rng.uniform(-50.0, 50.0);
    const double ty = rng.uniform(-50.0, 50.0);
    const double tz = rng.uniform(400.0, 800.0);

    DrawnSample s;
    s.params.theta = Tensor::from_vec({kThetaDim}, std::move(theta));
    s.params.beta = Tensor::from_vec({kBetaDim}, std::move(beta));
    s.cam.translation = Tensor::from_vec({3}, {tx, ty, tz});
    s.hand = hand_forward(rig, s.params);
    try {
      s.k2d = project(s.hand.joints3d, s.cam);
    } catch (const NumericalError&) {
      continue;  // a keypoint fell behind the camera: redraw
    }
    return s;
  }
  throw NumericalError("sample_gt: no camera-valid draw after 100 attempts");
}

Tensor render_input(const Tensor& k2d, int image_size, double sigma,
                    double noise_std, Rng& rng) {
  if (k2d.ndim() != 2 || k2d.extent(1) != 2)
    throw std::invalid_argument("render_input: keypoints must be N×2, got " +
                                shape_str(k2d.shape()));
  if (image_size < 1 || sigma <= 0.0 || noise_std < 0.0)
    throw std::invalid_argument(
        "render_input: image_size must be >= 1, sigma > 0, noise_std >= 0");
  const int k = k2d.extent(0), s = image_size;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const double clip = 4.0 * noise_std;
  std::vector<double> img(static_cast<size_t>(k) * s * s);
  size_t idx = 0;
  for (int j = 0; j < k; ++j) {
    const double u = k2d.values()[2 * j];
    const double v = k2d.values()[2 * j + 1];
    for (int y = 0; y < s; ++y) {
      const double dy2 = (y - v) * (y - v);
      for (int x = 0; x < s; ++x) {
        double val = std::exp(-((x - u) * (x - u) + dy2) * inv);
        if (noise_std > 0.0) {
          val += std::clamp(rng.normal() * noise_std, -clip, clip);
          val = std::max(0.0, val);
        }
        img[idx++] = val;
      }
    }
  }
  return Tensor::from_vec({k, s, s}, std::move(img));
}

Dataset make_dataset(int n, std::uint64_t seed, const HandRig& rig,
                     double frac_2d_only, double sigma, double noise_std) {
  if (n < 1)
    throw std::invalid_argument("make_dataset: need at least one sample");
  if (frac_2d_only < 0.0 || frac_2d_only > 1.0)
    throw std::invalid_argument("make_dataset: frac_2d_only must be in [0,1]");
  if (sigma <= 0.0 || noise_std < 0.0)
    throw std::invalid_argument("make_dataset: sigma > 0, noise_std >= 0");
  if (rig.n_keypoints() != kImageChannels)
    throw std::invalid_argument("make_dataset: rig regresses " +
                                std::to_string(rig.n_keypoints()) +
                                " keypoints, images need " +
                                std::to_string(kImageChannels));

  Dataset ds;
  ds.seed = seed;
  ds.rig_id = rig_digest(rig);
  ds.frac_2d_only = frac_2d_only;
  ds.sigma = sigma;
  ds.noise_std = noise_std;
  const int n_2d = std::min<int>(
      n, static_cast<int>(std::ceil(static_cast<double>(n) * frac_2d_only)));
  ds.samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seeds(seed, static_cast<uint64_t>(i)));
    DrawnSample d = sample_gt(rng, rig);
    Sample s;
    s.image = render_input(d.k2d, kImageSize, sigma, noise_std, rng);
    s.true_params = d.params;
    s.true_cam = d.cam;
    s.gt.k2d = d.k2d;
    s.gt.mode =
        i < n_2d ? AnnotationMode::kOnly2d : AnnotationMode::kFull3d;
    if (s.gt.mode == AnnotationMode::kFull3d) {
      s.gt.k3d = d.hand.joints3d;
      s.gt.mano_params = concat({d.params.theta, d.params.beta});
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  if (ds.samples.empty())
    throw std::invalid_argument("save_dataset: dataset is empty");
  BinWriter w(path);
  w.magic(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u64(ds.samples.size());
  w.u64(ds.seed);
  w.u64(ds.rig_id);
  w.f64(ds.frac_2d_only);
  w.f64(ds.sigma);
  w.f64(ds.noise_std);
  const std::vector<double> zeros_k3d(kK3dDim, 0.0);
  const std::vector<double> zeros_mano(kManoDim, 0.0);
  for (const Sample& s : ds.samples) {
    require_shape(s.image, {kImageChannels, kImageSize, kImageSize}, "image");
    require_shape(s.gt.k2d, {kImageChannels, 2}, "gt.k2d");
    require_shape(s.true_params.theta, {kThetaDim}, "theta");
    require_shape(s.true_params.beta, {kBetaDim}, "beta");
    require_shape(s.true_cam.translation, {3}, "camera translation");
    w.u8(static_cast<uint8_t>(s.gt.mode));
    w.f64_block(s.image.values().data(), kImageDim);
    w.f64_block(s.gt.k2d.values().data(), kK2dDim);
    if (s.gt.mode == AnnotationMode::kFull3d) {
      require_shape(s.gt.k3d, {kImageChannels, 3}, "gt.k3d");
      require_shape(s.gt.mano_params, {kManoDim}, "gt.mano_params");
      w.f64_block(s.gt.k3d.values().data(), kK3dDim);
      w.f64_block(s.gt.mano_params.values().data(), kManoDim);
    } else {
      w.f64_block(zeros_k3d.data(), kK3dDim);
      w.f64_block(zeros_mano.data(), kManoDim);
    }
    w.f64_block(s.true_params.theta.values().data(), kThetaDim);
    w.f64_block(s.true_params.beta.values().data(), kBetaDim);
    w.f64_block(s.true_cam.translation.values().data(), 3);
  }
  // Trailing length of everything before it, for partial-write detection.
  w.u64(w.bytes_written());
  w.close();
}

Dataset load_dataset(const std::string& path) {
  BinReader r(path);
  r.magic(kDatasetMagic);
  const uint32_t version = r.u32("version");
  if (version != kDatasetVersion)
    throw FormatError(path + ": unsupported dataset version " +
                      std::to_string(version) + " (expected " +
                      std::to_string(kDatasetVersion) + ")");
  Dataset ds;
  const uint64_t n = r.u64("sample count");
  if (n == 0 || n > kMaxSamples)
    throw FormatError(path + ": implausible sample count " +
                      std::to_string(n));
  ds.seed = r.u64("seed");
  ds.rig_id = r.u64("rig id");
  ds.frac_2d_only = r.f64("frac_2d_only");
  ds.sigma = r.f64("sigma");
  ds.noise_std = r.f64("noise_std");
  ds.samples.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    const std::string at = "sample " + std::to_string(i);
    const uint8_t mode = r.u8(at.c_str());
    if (mode > 1)
      throw FormatError(path + ": " + at + " has invalid annotation mode " +
                        std::to_string(mode));
    Sample s;
    s.gt.mode = static_cast<AnnotationMode>(mode);
    s.image = Tensor::from_vec({kImageChannels, kImageSize, kImageSize},
                               r.f64_block(kImageDim, "image"));
    s.gt.k2d =
        Tensor::from_vec({kImageChannels, 2}, r.f64_block(kK2dDim, "k2d"));
    std::vector<double> k3d = r.f64_block(kK3dDim, "k3d");
    std::vector<double> mano = r.f64_block(kManoDim, "mano params");
    if (s.gt.mode == AnnotationMode::kFull3d) {
      s.gt.k3d = Tensor::from_vec({kImageChannels, 3}, std::move(k3d));
      s.gt.mano_params = Tensor::from_vec({kManoDim}, std::move(mano));
    }
    s.true_params.theta =
        Tensor::from_vec({kThetaDim}, r.f64_block(kThetaDim, "theta"));
    s.true_params.beta =
        Tensor::from_vec({kBetaDim}, r.f64_block(kBetaDim, "beta"));
    s.true_cam.translation =
        Tensor::from_vec({3}, r.f64_block(3, "camera translation"));
    ds.samples.push_back(std::move(s));
  }
  const uint64_t before_trailer = r.bytes_read();
  const uint64_t trailer = r.u64("length trailer");
  if (trailer != before_trailer)
    throw FormatError(path + ": length trailer says " +
                      std::to_string(trailer) + " bytes, read " +
                      std::to_string(before_trailer) +
                      " (file truncated or padded)");
  if (!r.at_end())
    throw FormatError(path + ": trailing bytes after dataset payload");
  return ds;
}

}  // namespace handkd
