#include "handkd/nets.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "handkd/binio.hpp"
#include "handkd/camera.hpp"
#include "handkd/rng.hpp"

namespace handkd {

namespace {

constexpr char kModelMagic[4] = {'H', 'K', 'D', 'M'};
constexpr uint32_t kModelVersion = 1;
constexpr uint64_t kInitStream = 0x4d4f44454c495454ULL;

// Format sanity bounds: generous for this tool, tight enough that a
// corrupted config block cannot trigger a giant allocation.
constexpr uint32_t kMaxStages = 16;
constexpr uint32_t kMaxExtent = 8192;

void validate_config(const NetConfig& cfg) {
  if (cfg.channel_widths.empty())
    throw std::invalid_argument("net config: needs at least one stage");
  for (int w : cfg.channel_widths)
    if (w < 1)
      throw std::invalid_argument("net config: stage width must be >= 1");
  if (cfg.head_dim < 1)
    throw std::invalid_argument("net config: head_dim must be >= 1");
  if (cfg.input_channels < 1 || cfg.input_h < 1 || cfg.input_w < 1)
    throw std::invalid_argument("net config: input extents must be >= 1");
}

Tensor init_param(Rng& rng, Shape shape, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_vec(std::move(shape), std::move(v), true);
}

}  // namespace

NetConfig teacher_config(std::uint64_t seed) {
  NetConfig c;
  c.channel_widths = {32, 64, 128};
  c.head_dim = 128;
  c.seed = seed;
  return c;
}

NetConfig student_config(const std::string& size, std::uint64_t seed) {
  NetConfig c;
  c.seed = seed;
  if (size == "small") {
    c.channel_widths = {8, 16, 32};
    c.head_dim = 32;
  } else if (size == "large") {
    c.channel_widths = {16, 32, 64};
    c.head_dim = 64;
  } else {
    throw std::invalid_argument("unknown student size '" + size +
                                "' (expected small|large)");
  }
  return c;
}

std::vector<NamedParam> named_params(const Model& model) {
  std::vector<NamedParam> out;
  for (size_t s = 0; s < model.stages.size(); ++s) {
    const std::string tag = "stage" + std::to_string(s);
    out.push_back({tag + "_weight", model.stages[s].weight});
    out.push_back({tag + "_bias", model.stages[s].bias});
  }
  out.push_back({"attn_key", model.attn_key});
  out.push_back({"attn_query", model.attn_query});
  out.push_back({"mlp_w1", model.mlp_w1});
  out.push_back({"mlp_b1", model.mlp_b1});
  out.push_back({"mlp_w2", model.mlp_w2});
  out.push_back({"mlp_b2", model.mlp_b2});
  return out;
}

Model init_model(const NetConfig& cfg) {
  validate_config(cfg);
  Model m;
  m.config = cfg;
  Rng rng(mix_seeds(cfg.seed, kInitStream));
  int c_in = cfg.input_channels;
  for (int s = 0; s < cfg.stages(); ++s) {
    const int c_out = cfg.channel_widths[s];
    const int fan = c_in * 9;
    Model::Stage st;
    st.weight = init_param(rng, {c_out, c_in, 3, 3}, fan);
    st.bias = init_param(rng, {c_out}, fan);
    m.stages.push_back(std::move(st));
    c_in = c_out;
  }
  const int c = c_in, d = cfg.head_dim;
  m.attn_key = init_param(rng, {c, d}, c);
  m.attn_query = init_param(rng, {d}, d);
  m.mlp_w1 = init_param(rng, {c, d}, c);
  m.mlp_b1 = init_param(rng, {1, d}, c);
  m.mlp_w2 = init_param(rng, {d, kHeadOutputs}, d);
  m.mlp_b2 = init_param(rng, {1, kHeadOutputs}, d);
  // Damp the shape-coefficient outputs (columns 48..57) so freshly
  // initialized models predict meshes near the template.
  auto& w2 = m.mlp_w2.raw_data();
  auto& b2 = m.mlp_b2.raw_data();
  for (int r = 0; r < d; ++r)
    for (int j = 48; j < 58; ++j) w2[static_cast<size_t>(r) * kHeadOutputs + j] *= 0.1;
  for (int j = 48; j < 58; ++j) b2[j] *= 0.1;
  return m;
}

Tensor forward_backbone(const Model& model, const Tensor& image) {
  const NetConfig& cfg = model.config;
  if (image.ndim() != 3 || image.extent(0) != cfg.input_channels ||
      image.extent(1) != cfg.input_h || image.extent(2) != cfg.input_w)
    throw std::invalid_argument(
        "forward_backbone: image " + shape_str(image.shape()) +
        " does not match configured input " +
        shape_str({cfg.input_channels, cfg.input_h, cfg.input_w}));
  Tensor x = image;
  for (const Model::Stage& st : model.stages)
    x = tanh_op(conv2d(x, st.weight, st.bias, /*stride=*/2, /*pad=*/1));
  return x;
}

HeadResult forward_head(const Model& model, const Tensor& feature_map,
                        const HandRig& rig) {
  const int c = model.config.channel_widths.back();
  const int d = model.config.head_dim;
  if (feature_map.ndim() != 3 || feature_map.extent(0) != c)
    throw std::invalid_argument(
        "forward_head: feature map " + shape_str(feature_map.shape()) +
        " does not carry the " + std::to_string(c) + " backbone channels");
  const int hw = feature_map.extent(1) * feature_map.extent(2);

  Tensor tokens = transpose(reshape(feature_map, {c, hw}));  // {hw, c}
  Tensor keys = matmul(tokens, model.attn_key);              // {hw, d}
  Tensor logits =
      mul(matmul(keys, reshape(model.attn_query, {d, 1})), 1.0 / std::sqrt(d));
  Tensor attn = softmax(logits);                     // {hw, 1}
  Tensor attended = matmul(transpose(attn), tokens); // {1, c}
  Tensor hidden = tanh_op(add(matmul(attended, model.mlp_w1), model.mlp_b1));
  Tensor out =
      reshape(add(matmul(hidden, model.mlp_w2), model.mlp_b2), {kHeadOutputs});

  HeadResult r;
  r.attention = attn;
  r.pred.theta = slice(out, 0, 48);
  r.pred.beta = slice(out, 48, 10);
  // Regress translation around a 600 mm working distance so raw outputs
  // near zero start inside the camera's valid depth range.
  r.pred.pi.translation =
      add(slice(out, 58, 3), Tensor::from_vec({3}, {0.0, 0.0, 600.0}));
  HandOutput hand = hand_forward(rig, {r.pred.theta, r.pred.beta});
  r.pred.k3d = hand.joints3d;
  r.pred.k2d = project(hand.joints3d, r.pred.pi);
  r.vertices = hand.vertices;
  return r;
}

ForwardResult forward_full(const Model& model, const Tensor& image,
                           const HandRig& rig) {
  ForwardResult fr;
  fr.feature_map = forward_backbone(model, image);
  HeadResult hr = forward_head(model, fr.feature_map, rig);
  fr.pred = std::move(hr.pred);
  fr.vertices = std::move(hr.vertices);
  fr.attention = std::move(hr.attention);
  return fr;
}

long long param_count_total(const Model& model) {
  long long n = 0;
  for (const NamedParam& p : named_params(model)) n += p.tensor.numel();
  return n;
}

long long param_count(const Model& model) {
  return model.frozen ? 0 : param_count_total(model);
}

void freeze(Model& model) {
  model.frozen = true;
  for (NamedParam& p : named_params(model)) p.tensor.set_requires_grad(false);
}

std::string param_digest(const Model& model) {
  std::vector<double> all;
  all.reserve(static_cast<size_t>(param_count_total(model)));
  for (const NamedParam& p : named_params(model)) {
    const auto& v = p.tensor.values();
    all.insert(all.end(), v.begin(), v.end());
  }
  return bytes_digest(all.data(), all.size() * sizeof(double));
}

void write_model(BinWriter& w, const Model& model) {
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  const NetConfig& cfg = model.config;
  w.u32(static_cast<uint32_t>(cfg.stages()));
  for (int cw : cfg.channel_widths) w.u32(static_cast<uint32_t>(cw));
  w.u32(static_cast<uint32_t>(cfg.head_dim));
  w.u32(static_cast<uint32_t>(cfg.input_channels));
  w.u32(static_cast<uint32_t>(cfg.input_h));
  w.u32(static_cast<uint32_t>(cfg.input_w));
  w.u64(cfg.seed);
  for (const NamedParam& p : named_params(model))
    w.section(p.name, p.tensor.values());
  w.u8(model.frozen ? 1 : 0);
}

Model read_model(BinReader& r, const std::string& origin) {
  r.magic(kModelMagic);
  const uint32_t version = r.u32("version");
  if (version != kModelVersion)
    throw FormatError(origin + ": unsupported model version " +
                      std::to_string(version) + " (expected " +
                      std::to_string(kModelVersion) + ")");
  NetConfig cfg;
  const uint32_t n_stages = r.u32("stage count");
  if (n_stages == 0 || n_stages > kMaxStages)
    throw FormatError(origin + ": implausible stage count " +
                      std::to_string(n_stages));
  auto extent = [&](const char* what) {
    const uint32_t v = r.u32(what);
    if (v == 0 || v > kMaxExtent)
      throw FormatError(origin + ": implausible " + std::string(what) + " " +
                        std::to_string(v));
    return static_cast<int>(v);
  };
  for (uint32_t s = 0; s < n_stages; ++s)
    cfg.channel_widths.push_back(extent("stage width"));
  cfg.head_dim = extent("head_dim");
  cfg.input_channels = extent("input_channels");
  cfg.input_h = extent("input_h");
  cfg.input_w = extent("input_w");
  cfg.seed = r.u64("seed");

  Model m = init_model(cfg);  // allocates the canonical structure
  for (NamedParam& p : named_params(m)) {
    std::vector<double> vals = r.section(p.name);
    if (vals.size() != static_cast<size_t>(p.tensor.numel()))
      throw FormatError(origin + ": section '" + p.name + "' holds " +
                        std::to_string(vals.size()) + " values, expected " +
                        std::to_string(p.tensor.numel()));
    p.tensor.raw_data() = std::move(vals);
    if (!p.tensor.all_finite())
      throw FormatError(origin + ": section '" + p.name +
                        "' contains non-finite values");
  }
  const uint8_t frozen = r.u8("frozen flag");
  if (frozen > 1)
    throw FormatError(origin + ": frozen flag must be 0 or 1, got " +
                      std::to_string(frozen));
  if (frozen) freeze(m);
  return m;
}

void save_model(const Model& model, const std::string& path) {
  BinWriter w(path);
  write_model(w, model);
  w.close();
}

Model load_model(const std::string& path) {
  BinReader r(path);
  Model m = read_model(r, path);
  if (!r.at_end())
    throw FormatError(path + ": trailing bytes after model payload");
  return m;
}

}  // namespace handkd
