#pragma once

// SELD-Mamba network: three cross-stitched convolutional encoder branches
// (SED, DoA, SDE), three BMamba decoders per branch (one per output track)
// and independent per-track FC heads.
//
// Parameter names follow the module path, e.g.
//   encoder.sed.stage1.conv1.weight, encoder.stitch2,
//   decoder.doa.track0.fwd.layer1.linear_input.weight, head.sde.track2.bias.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "seld/autodiff.hpp"
#include "seld/features.hpp"
#include "seld/ops.hpp"
#include "seld/ssm.hpp"

namespace seld {

inline constexpr std::size_t kNumTracks = 3;
inline constexpr std::size_t kNumBranches = 3;

enum class Branch : std::size_t { sed = 0, doa = 1, sde = 2 };
const char* branch_name(std::size_t branch);

struct ModelConfig {
  std::size_t n_classes = 13;
  std::size_t n_tracks = 3;
  std::array<std::size_t, 4> conv_channels{64, 128, 256, 512};
  std::size_t d_model = 512;
  std::size_t bmamba_per_branch = 3;
  std::size_t d_state = 16;
  std::size_t expand = 2;
  std::size_t conv_kernel = 4;
  std::size_t dt_rank = 0;
  Discretization discretization = Discretization::euler;
  bool layer_residual = true;
  bool sde_use_ivs = false;
  std::size_t n_mels = 128;
  double stitch_diag = 0.9;
  double stitch_off = 0.05;

  /// Input channel count of a branch: 4 log-mel, plus 3 IV channels for DoA
  /// (and SDE when sde_use_ivs).
  std::size_t input_channels(std::size_t branch) const;
  MambaConfig mamba() const;
  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

struct ConvUnit {
  Parameter* weight = nullptr;  // (C_out, C_in, 3, 3), no bias: BN follows
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  Parameter* running_mean = nullptr;  // buffer
  Parameter* running_var = nullptr;   // buffer
};

struct DualConvParams {
  ConvUnit first;
  ConvUnit second;
};

enum class Pool { tf, f };

/// Two (3x3 conv -> batch norm -> ReLU) units, then 2x2 (tf) or 1x2 (f)
/// average pooling. x: (B, C_in, T, F).
Var dual_conv_stage(Binder& bind, Var x, const DualConvParams& p, Pool pool, BatchNormMode mode);

/// out_i = sum_j alpha(i, j) x_j for three same-shape tensors; alpha is (3, 3).
std::array<Var, 3> cross_stitch(const std::array<Var, 3>& x, Var alpha);

struct HeadParams {
  Parameter* weight = nullptr;  // (K, D)
  Parameter* bias = nullptr;    // (K)
};

struct TrackOutput {
  Var sed;   // (B, 3, T', n_classes), sigmoid
  Var doa;   // (B, 3, T', 3), tanh
  Var dist;  // (B, 3, T', 1), ReLU
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  /// Three (B, C_b, T, F) inputs -> three (B, T/8, D) embeddings.
  std::array<Var, 3> encoder_forward(Binder& bind, const std::array<Var, 3>& inputs, BatchNormMode mode) const;
  TrackOutput decoder_forward(Binder& bind, const std::array<Var, 3>& embeddings) const;
  TrackOutput forward(Binder& bind, const std::array<Var, 3>& inputs, BatchNormMode mode) const;

  /// Per (channel, mel bin) standardization applied to raw features before
  /// they enter the graph. Identity until set_input_stats.
  void set_input_stats(std::size_t branch, const Tensor& mean, const Tensor& std);
  Tensor normalize_input(std::size_t branch, const Tensor& x) const;

  const DualConvParams& stage(std::size_t branch, std::size_t s) const { return stages_[branch][s]; }
  Parameter& stitch(std::size_t s) const { return *stitch_[s]; }
  const BMambaParams& decoder(std::size_t branch, std::size_t track) const { return decoders_[branch][track]; }
  const HeadParams& head(std::size_t branch, std::size_t track) const { return heads_[branch][track]; }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  std::array<std::array<DualConvParams, 4>, 3> stages_{};
  std::array<Parameter*, 4> stitch_{};
  std::array<std::array<BMambaParams, 3>, 3> decoders_{};
  std::array<std::array<HeadParams, 3>, 3> heads_{};
  std::array<Parameter*, 3> input_mean_{};
  std::array<Parameter*, 3> input_std_{};
};

/// Stacks per-clip branch features into batched (B, C, T, F) tensors.
std::array<Tensor, 3> stack_features(const std::vector<const BranchFeatures*>& items);

struct Complexity {
  std::size_t params = 0;
  std::size_t macs = 0;
};

/// Learnable scalars (buffers excluded) and multiply-accumulates for
/// `seconds` of audio at the feature hop. Convolutions count
/// C_in C_out k^2 T F, linear maps in * out per frame, the cross-stitch
/// 9 per element, the depthwise conv E K per frame and the scan 2 E N per
/// frame (state update and readout).
Complexity count_params_macs(const ModelConfig& cfg, const FeatureConfig& features, double seconds);

/// Text manifest: one line per parameter with shape and element count.
std::string describe_parameters(const ParameterStore& store);

}  // namespace seld
