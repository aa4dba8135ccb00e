#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. Nothing here calls the library code it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "seld/objective.hpp"
#include "seld/tensor.hpp"

namespace seld::testing {

/// Straight-from-the-recurrence selective scan.
inline Tensor naive_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                         bool zoh) {
  const std::size_t B = x.dim(0), L = x.dim(1), E = x.dim(2), N = a.dim(1);
  Tensor y({B, L, E});
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t e = 0; e < E; ++e) {
      std::vector<double> h(N, 0.0);
      for (std::size_t k = 0; k < L; ++k) {
        double out = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double dt = delta.at({bi, k, e});
          const double abar = std::exp(dt * a.at({e, n}));
          const double bbar = zoh ? (abar - 1.0) / a.at({e, n}) * b.at({bi, k, n}) : dt * b.at({bi, k, n});
          h[n] = abar * h[n] + bbar * x.at({bi, k, e});
          out += c.at({bi, k, n}) * h[n];
        }
        y.at({bi, k, e}) = out;
      }
    }
  }
  return y;
}

/// Random track targets: each (item, track, frame) is active with
/// probability `p_active`, carrying a random class, unit direction and distance.
inline FrameTargets random_targets(std::mt19937_64& rng, std::size_t batch, std::size_t frames, std::size_t classes,
                                   double p_active = 0.6) {
  FrameTargets t{Tensor({batch, 3, frames, classes}), Tensor({batch, 3, frames, 3}), Tensor({batch, 3, frames, 1}),
                 Tensor({batch, 3, frames})};
  std::bernoulli_distribution on(p_active);
  std::uniform_int_distribution<std::size_t> cls(0, classes - 1);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> d(0.5, 4.0);
  for (std::size_t r = 0; r < batch * 3 * frames; ++r) {
    if (!on(rng)) continue;
    t.active[r] = 1.0;
    t.sed[r * classes + cls(rng)] = 1.0;
    double v[3] = {g(rng), g(rng), g(rng)};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (int k = 0; k < 3; ++k) t.doa[r * 3 + k] = v[k] / n;
    t.dist[r] = d(rng);
  }
  return t;
}

inline TrackTensors random_predictions(std::mt19937_64& rng, const FrameTargets& t) {
  std::uniform_real_distribution<double> p(0.02, 0.98), u(-1.0, 1.0), d(0.2, 5.0);
  TrackTensors out{Tensor(t.sed.shape()), Tensor(t.doa.shape()), Tensor(t.dist.shape())};
  for (auto& v : out.sed.data()) v = p(rng);
  for (auto& v : out.doa.data()) v = u(rng);
  for (auto& v : out.dist.data()) v = d(rng);
  return out;
}

struct BruteForcePit {
  double loss = 0.0;
  std::vector<int> best;  // lexicographic permutation index per (item, frame)
  std::vector<double> margin;  // second-best minus best frame term
};

/// Enumerates the six track assignments per frame with the loss written out
/// cell by cell. Pred track i is scored against target track perm[i].
inline BruteForcePit brute_force_pit(const TrackTensors& pred, const FrameTargets& tgt, const LossWeights& w) {
  const std::size_t B = tgt.active.dim(0), T = tgt.active.dim(2), C = tgt.sed.dim(3);
  const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  double n_active = 0.0;
  for (std::size_t i = 0; i < tgt.active.size(); ++i) n_active += tgt.active[i];
  const double n_sed = static_cast<double>(B * 3 * T * C);
  const double lo = 1e-7, hi = 1.0 - 1e-7;
  BruteForcePit r;
  double sed_total = 0.0, doa_total = 0.0, dist_total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      double best = std::numeric_limits<double>::infinity(), second = best;
      int best_i = 0;
      double bs = 0.0, bd = 0.0, br = 0.0;
      for (int pi = 0; pi < 6; ++pi) {
        double s = 0.0, d = 0.0, rr = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
          const std::size_t j = static_cast<std::size_t>(perms[pi][i]);
          for (std::size_t c = 0; c < C; ++c) {
            const double p = std::min(std::max(pred.sed.at({b, i, t, c}), lo), hi);
            const double y = tgt.sed.at({b, j, t, c});
            s += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
          }
          if (tgt.active.at({b, j, t}) > 0.0) {
            for (std::size_t k = 0; k < 3; ++k) {
              const double e = pred.doa.at({b, i, t, k}) - tgt.doa.at({b, j, t, k});
              d += e * e;
            }
            rr += std::abs(pred.dist.at({b, i, t, 0}) - tgt.dist.at({b, j, t, 0}));
          }
        }
        double v = w.sed * s / n_sed;
        if (n_active > 0.0) v += w.doa * d / (3.0 * n_active) + w.dist * rr / n_active;
        if (v < best) {
          second = best;
          best = v;
          best_i = pi;
          bs = s;
          bd = d;
          br = rr;
        } else if (v < second) {
          second = v;
        }
      }
      r.best.push_back(best_i);
      r.margin.push_back(second - best);
      sed_total += bs;
      doa_total += bd;
      dist_total += br;
    }
  }
  r.loss = w.sed * sed_total / n_sed;
  if (n_active > 0.0) r.loss += w.doa * doa_total / (3.0 * n_active) + w.dist * dist_total / n_active;
  return r;
}

}  // namespace seld::testing
