#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "handkd/hand_model.hpp"
#include "handkd/losses.hpp"
#include "handkd/tensor.hpp"

namespace handkd {

/// Architecture of a regression network: a stack of stride-2 3×3
/// convolution stages (one entry in channel_widths per stage) followed by
/// a cross-attention head that regresses hand and camera parameters.
struct NetConfig {
  std::vector<int> channel_widths;  ///< output channels per backbone stage
  int head_dim = 32;                ///< attention/key dim and MLP hidden width
  int input_channels = 21;
  int input_h = 64;
  int input_w = 64;
  std::uint64_t seed = 0;

  int stages() const { return static_cast<int>(channel_widths.size()); }
};

/// The reference (teacher-sized) configuration.
NetConfig teacher_config(std::uint64_t seed);
/// Compact student configurations: "small" or "large".
NetConfig student_config(const std::string& size, std::uint64_t seed);

/// Head output layout: 48 pose + 10 shape + 3 camera translation.
inline constexpr int kHeadOutputs = 61;

struct Model {
  NetConfig config;
  bool frozen = false;

  struct Stage {
    Tensor weight;  ///< {C_out, C_in, 3, 3}
    Tensor bias;    ///< {C_out}
  };
  std::vector<Stage> stages;

  Tensor attn_key;    ///< {C_last, head_dim}: token → key projection
  Tensor attn_query;  ///< {head_dim}: the single learned query
  Tensor mlp_w1;      ///< {C_last, head_dim}
  Tensor mlp_b1;      ///< {1, head_dim}
  Tensor mlp_w2;      ///< {head_dim, 61}
  Tensor mlp_b2;      ///< {1, 61}
};

struct NamedParam {
  std::string name;
  Tensor tensor;  // aliases the model's parameter node
};

/// The model's parameters in their one canonical order (used by the
/// optimizer, the file format, and checksums alike).
std::vector<NamedParam> named_params(const Model& model);

/// Builds a model with fan-in-scaled uniform initialization
/// U(±1/√fan_in) drawn from a generator seeded by cfg.seed. The shape
/// rows of the final regression layer start scaled down 10× so initial
/// meshes stay near the template. Identical configs give bit-identical
/// parameters. Throws std::invalid_argument on a malformed config.
Model init_model(const NetConfig& cfg);

/// Stacked stride-2 3×3 convolutions with tanh after each stage. The
/// returned map (C_last × H/2^s × W/2^s) is the distillation feature map.
/// Throws std::invalid_argument if the image does not match the config.
Tensor forward_backbone(const Model& model, const Tensor& image);

struct HeadResult {
  Prediction pred;
  Tensor vertices;   ///< posed mesh {N_v, 3}, for mesh-level evaluation
  Tensor attention;  ///< attention weights over tokens {H·W, 1}
};

/// One learned query cross-attends (single-head, scaled dot-product)
/// over the H·W feature-map tokens; the attended vector runs through a
/// 2-layer tanh MLP regressing θ (48), β (10) and camera translation
/// (3, with a +600 mm depth offset). Keypoints come from the hand model
/// and projection, so the whole path is differentiable.
HeadResult forward_head(const Model& model, const Tensor& feature_map,
                        const HandRig& rig);

struct ForwardResult {
  Prediction pred;
  Tensor feature_map;
  Tensor vertices;
  Tensor attention;
};

/// forward_backbone + forward_head in one call.
ForwardResult forward_full(const Model& model, const Tensor& image,
                           const HandRig& rig);

/// Number of trainable scalars: 0 when the model is frozen.
long long param_count(const Model& model);
/// Number of parameter scalars regardless of frozen state.
long long param_count_total(const Model& model);

/// Marks the model frozen: parameters stop tracking gradients and the
/// trainer refuses to register them with an optimizer.
void freeze(Model& model);

/// 16-hex digest over all parameter bytes in canonical order.
std::string param_digest(const Model& model);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

class BinWriter;
class BinReader;
/// Streams exactly the bytes save_model writes, into an open writer, so
/// composite files (training checkpoints) can embed a model payload.
void write_model(BinWriter& w, const Model& model);
/// Counterpart of write_model; `origin` names the file in diagnostics.
/// Unlike load_model it leaves any trailing bytes to the caller.
Model read_model(BinReader& r, const std::string& origin);

}  // namespace handkd
