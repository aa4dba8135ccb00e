#pragma once

// Selective state-space machinery: discretization, the selective scan, the
// Mamba layer, RMSNorm and the bidirectional block.
//
// Sequences are laid out batch-first, (B, L, channels). The state matrix is
// diagonal per channel and stored as A = -exp(a_log) so every entry is
// negative and exp(delta * A) lies in (0, 1).

#include <array>
#include <random>
#include <string>

#include "seld/autodiff.hpp"

namespace seld {

enum class Discretization {
  euler,  ///< B_bar = delta * B
  zoh,    ///< B_bar = (exp(delta * A) - 1) / A * B
};

struct Discretized {
  Tensor a_bar;  // (L, E, N)
  Tensor b_bar;  // (L, E, N)
};

/// delta (L, E) > 0, a (E, N) < 0, b (L, N).
Discretized discretize(const Tensor& delta, const Tensor& a, const Tensor& b, Discretization mode);

/// Reference scan kernel. x, delta: (B, L, E); a: (E, N); b, c: (B, L, N).
/// h_k = a_bar_k * h_{k-1} + b_bar_k * x_k, y_k = <c_k, h_k>, h_0 = 0.
/// When `states` is non-null it receives every h_k as (B, L, E, N).
Tensor scan_forward(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                    Discretization mode, Tensor* states = nullptr);

/// Graph primitive wrapping scan_forward with its reverse-time adjoint.
Var selective_scan(Var x, Var delta, Var a, Var b, Var c, Discretization mode);

/// Per-frame RMS normalization over the last axis: x / sqrt(mean(x^2) + eps) * gain.
Var rms_norm(Var x, Var gain, double eps = 1e-6);

struct MambaConfig {
  std::size_t d_model = 512;   // D
  std::size_t expand = 2;      // E = expand * D
  std::size_t d_state = 16;    // N
  std::size_t conv_kernel = 4;
  std::size_t dt_rank = 0;     // 0 selects ceil(D / 16)
  Discretization discretization = Discretization::euler;
  /// u + layer(u) inside each component. Without it the stacked layers,
  /// which are high-order polynomials near zero, collapse activations.
  bool residual = true;

  std::size_t d_inner() const { return expand * d_model; }
  std::size_t rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
};

/// Input-dependent SSM parameters: delta = softplus(dt_proj(dt_in(x))),
/// B = b_proj(x), C = c_proj(x), plus the diagonal state matrix.
struct SsmParams {
  Parameter* a_log = nullptr;      // (E, N)
  Parameter* dt_in = nullptr;      // (R, E)
  Parameter* dt_proj_w = nullptr;  // (E, R)
  Parameter* dt_proj_b = nullptr;  // (E)
  Parameter* b_proj = nullptr;     // (N, E)
  Parameter* c_proj = nullptr;     // (N, E)
};

struct MambaLayerParams {
  Parameter* in_w = nullptr;  // (E, D)
  Parameter* in_b = nullptr;
  Parameter* gate_w = nullptr;  // (E, D)
  Parameter* gate_b = nullptr;
  Parameter* conv_w = nullptr;  // (E, 1, K), depthwise causal
  Parameter* conv_b = nullptr;
  SsmParams ssm;
  Parameter* out_w = nullptr;  // (D, E)
  Parameter* out_b = nullptr;
  Discretization discretization = Discretization::euler;
  bool residual = true;

  std::vector<Parameter*> all() const;
};

struct BMambaParams {
  std::array<MambaLayerParams, 2> forward;
  std::array<MambaLayerParams, 2> backward;
  Parameter* norm_forward = nullptr;   // (D)
  Parameter* norm_backward = nullptr;  // (D)

  std::vector<Parameter*> all() const;
  /// Copy whose backward direction reuses the forward weights.
  BMambaParams tied() const;
};

MambaLayerParams make_mamba_layer(ParameterStore& store, const std::string& prefix, const MambaConfig& cfg,
                                  std::mt19937_64& rng);
BMambaParams make_bmamba(ParameterStore& store, const std::string& prefix, const MambaConfig& cfg,
                         std::mt19937_64& rng);

/// Selective SSM over x (B, L, E) with input-dependent delta, B, C.
Var selective_ssm(Binder& bind, Var x, const SsmParams& p, Discretization mode);

/// u (B, L, D) -> (B, L, D):
///   u_hat = Linear_in(u), z = Linear_gate(u), x = SiLU(CausalDepthwiseConv(u_hat)),
///   y = SiLU(z) * SSM(x), out = Linear_out(y).
Var mamba_layer(Binder& bind, Var u, const MambaLayerParams& p);

/// Two Mamba layers in sequence, each wrapped in a residual add when enabled.
Var mamba_component(Binder& bind, Var u, const std::array<MambaLayerParams, 2>& layers);

/// RMSNorm(fwd(u)) + flip(RMSNorm(bwd(flip(u)))), time flipped along axis 1.
Var bmamba_block(Binder& bind, Var u, const BMambaParams& p);

}  // namespace seld
