#pragma once

// Primitive catalog. Every function records one node on the graph of its
// inputs and validates shapes at record time. Broadcasting is limited to
// scalar-with-tensor (an operand with exactly one element).

#include <optional>
#include <vector>

#include "seld/autodiff.hpp"

namespace seld {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var add_scalar(Var x, double value);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }
inline Var operator-(Var x) { return scale(x, -1.0); }

/// [m,k] x [k,n] -> [m,n]
Var matmul(Var a, Var b);
/// x[..., in] * weight[out, in]^T + bias[out] over the flattened leading axes.
Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt);

/// x[B, C_in, L], weight[C_out, C_in/groups, K], bias[C_out] -> [B, C_out, L].
/// Causal pads K-1 on the left; otherwise K must be odd and padding is symmetric.
Var conv1d(Var x, Var weight, std::optional<Var> bias, std::size_t groups, bool causal);
/// x[B, C_in, H, W], weight[C_out, C_in, k, k] with odd k, zero padding k/2.
Var conv2d(Var x, Var weight, std::optional<Var> bias);
/// Non-overlapping average pooling over the last two axes of x[B, C, H, W].
Var avg_pool2d(Var x, std::size_t pool_h, std::size_t pool_w);

Var sigmoid(Var x);
Var silu(Var x);
Var softplus(Var x);
Var exp(Var x);
Var tanh(Var x);
Var relu(Var x);

/// Reductions to a one-element tensor of shape (1).
Var sum(Var x);
Var mean(Var x);
/// Reduction removing `axis`; a rank-1 input reduces to shape (1).
Var sum_axis(Var x, std::size_t axis);
Var mean_axis(Var x, std::size_t axis);

Var reshape(Var x, Shape shape);
/// Output axis i is input axis perm[i].
Var transpose(Var x, std::vector<std::size_t> perm);
Var flip(Var x, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& xs, std::size_t axis);

enum class BatchNormMode { training, inference };

/// Running statistics updated in training mode when present.
struct BatchNormBuffers {
  Parameter* running_mean = nullptr;
  Parameter* running_var = nullptr;
  double momentum = 0.1;
};

/// Per-channel normalization of x[B, C, ...] over every axis but 1.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormMode mode, BatchNormBuffers buffers = {}, double eps = 1e-5);

}  // namespace seld
