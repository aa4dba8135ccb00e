#pragma once

// Frame-level permutation-invariant training loss over three output tracks.
//
// All track tensors are (B, 3, T, K): sed K = n_classes (probabilities),
// doa K = 3 (Cartesian), dist K = 1 (meters). A permutation p pairs
// prediction track i with target track p[i].
//
// Normalization is global over the batch: L_sed averages BCE over every
// cell, L_doa and L_dist average over the cells of active target tracks.
// The denominators do not depend on the permutation, so the total is a sum
// of per-frame terms and choosing the best permutation per frame minimizes it.

#include <array>
#include <memory>
#include <string>

#include "seld/autodiff.hpp"

namespace seld {

struct LossWeights {
  double sed = 25.0;
  double doa = 5.0;
  double dist = 1.0;
};

enum class Stage { unified, stage1, stage2 };

LossWeights stage_schedule(Stage stage);
/// Accepts "unified", "stage1", "stage2".
LossWeights stage_schedule(const std::string& tag);
Stage parse_stage(const std::string& tag);
std::string stage_name(Stage stage);

struct FrameTargets {
  Tensor sed;     // (B, 3, T, C) one-hot on active rows
  Tensor doa;     // (B, 3, T, 3) unit vectors on active rows
  Tensor dist;    // (B, 3, T, 1) meters
  Tensor active;  // (B, 3, T) 0/1

  std::size_t batch() const { return active.dim(0); }
  std::size_t frames() const { return active.dim(2); }
  std::size_t classes() const { return sed.dim(3); }
};

/// Concatenates targets along the batch axis.
FrameTargets stack_targets(const std::vector<FrameTargets>& items);
/// Target copy with track axis reordered so that new track i = old track perm[i].
FrameTargets permute_tracks(const FrameTargets& t, const std::array<int, 3>& perm);

struct TrackTensors {
  Tensor sed;
  Tensor doa;
  Tensor dist;
};

using Permutation = std::array<int, 3>;
/// The six permutations in lexicographic order.
const std::array<Permutation, 6>& all_permutations();

struct ComponentLosses {
  double sed = 0.0;
  double doa = 0.0;
  double dist = 0.0;
};

inline constexpr double kBceClamp = 1e-7;

/// Losses with one permutation applied to every frame.
ComponentLosses component_losses(const TrackTensors& pred, const FrameTargets& tgt, const Permutation& perm);

struct PitResult {
  double loss = 0.0;
  ComponentLosses components;  // at the selected permutations
  Tensor best_perm;            // (B, T) index into all_permutations()
};

/// Frame-wise minimum over the six permutations. Ties pick the lowest index.
PitResult pit_loss(const TrackTensors& pred, const FrameTargets& tgt, const LossWeights& w);

/// Graph primitive: scalar loss whose gradient flows through each frame's
/// selected permutation. `result`, when given, is filled at forward time.
Var pit_loss(Var sed, Var doa, Var dist, const FrameTargets& tgt, const LossWeights& w,
             std::shared_ptr<PitResult> result = nullptr);

}  // namespace seld
