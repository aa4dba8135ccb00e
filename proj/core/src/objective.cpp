#include "seld/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace seld {

namespace {

constexpr std::size_t kTracks = 3;

void check_targets(const FrameTargets& t) {
  if (t.active.rank() != 3 || t.active.dim(1) != kTracks) {
    throw std::invalid_argument("targets: active must be (B, 3, T), got " + shape_str(t.active.shape()));
  }
  const std::size_t b = t.active.dim(0), f = t.active.dim(2);
  if (t.sed.rank() != 4 || t.sed.dim(0) != b || t.sed.dim(1) != kTracks || t.sed.dim(2) != f) {
    throw std::invalid_argument("targets: sed " + shape_str(t.sed.shape()) + " vs active " +
                                shape_str(t.active.shape()));
  }
  if (t.doa.shape() != Shape{b, kTracks, f, 3}) {
    throw std::invalid_argument("targets: doa must be " + shape_str({b, kTracks, f, 3}) + ", got " +
                                shape_str(t.doa.shape()));
  }
  if (t.dist.shape() != Shape{b, kTracks, f, 1}) {
    throw std::invalid_argument("targets: dist must be " + shape_str({b, kTracks, f, 1}) + ", got " +
                                shape_str(t.dist.shape()));
  }
}

void check_pred(const Shape& sed, const Shape& doa, const Shape& dist, const FrameTargets& t) {
  check_targets(t);
  auto fail = [](const char* what, const Shape& got, const Shape& want) {
    throw std::invalid_argument(std::string("pit_loss: ") + what + " prediction " + shape_str(got) + " vs target " +
                                shape_str(want));
  };
  if (sed != t.sed.shape()) fail("sed", sed, t.sed.shape());
  if (doa != t.doa.shape()) fail("doa", doa, t.doa.shape());
  if (dist != t.dist.shape()) fail("dist", dist, t.dist.shape());
}

void check_perm(const Permutation& p) {
  std::array<bool, 3> seen{};
  for (int v : p) {
    if (v < 0 || v > 2 || seen[static_cast<std::size_t>(v)]) {
      throw std::invalid_argument("invalid track permutation (" + std::to_string(p[0]) + "," + std::to_string(p[1]) +
                                  "," + std::to_string(p[2]) + ")");
    }
    seen[static_cast<std::size_t>(v)] = true;
  }
}

double bce(double p, double y) {
  const double q = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
  return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
}

double bce_grad(double p, double y) {
  if (p <= kBceClamp || p >= 1.0 - kBceClamp) return 0.0;
  return -y / p + (1.0 - y) / (1.0 - p);
}

// Unnormalized per-frame sums for one permutation, plus the shared counts.
struct Evaluator {
  const double* sed;
  const double* doa;
  const double* dist;
  const FrameTargets& tgt;
  std::size_t frames, classes;
  double n_sed, n_active;

  Evaluator(const double* s, const double* d, const double* r, const FrameTargets& t)
      : sed(s), doa(d), dist(r), tgt(t), frames(t.frames()), classes(t.classes()) {
    n_sed = static_cast<double>(t.sed.size());
    n_active = 0.0;
    for (double a : t.active.data()) n_active += a;
  }

  std::size_t row(std::size_t b, std::size_t track, std::size_t t) const { return (b * kTracks + track) * frames + t; }

  ComponentLosses frame_sums(std::size_t b, std::size_t t, const Permutation& p) const {
    ComponentLosses s;
    for (std::size_t i = 0; i < kTracks; ++i) {
      const std::size_t pr = row(b, i, t), tr = row(b, static_cast<std::size_t>(p[i]), t);
      for (std::size_t c = 0; c < classes; ++c) s.sed += bce(sed[pr * classes + c], tgt.sed[tr * classes + c]);
      if (tgt.active[tr] > 0.0) {
        for (std::size_t k = 0; k < 3; ++k) {
          const double d = doa[pr * 3 + k] - tgt.doa[tr * 3 + k];
          s.doa += d * d;
        }
        s.dist += std::abs(dist[pr] - tgt.dist[tr]);
      }
    }
    return s;
  }

  double weighted(const ComponentLosses& s, const LossWeights& w) const {
    double v = w.sed * s.sed / n_sed;
    if (n_active > 0.0) v += w.doa * s.doa / (3.0 * n_active) + w.dist * s.dist / n_active;
    return v;
  }

  ComponentLosses normalize(const ComponentLosses& s) const {
    ComponentLosses r;
    r.sed = s.sed / n_sed;
    if (n_active > 0.0) {
      r.doa = s.doa / (3.0 * n_active);
      r.dist = s.dist / n_active;
    }
    return r;
  }

  PitResult run(const LossWeights& w) const {
    PitResult r;
    const std::size_t batch = tgt.batch();
    r.best_perm = Tensor({batch, frames});
    ComponentLosses total;
    const auto& perms = all_permutations();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < frames; ++t) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        ComponentLosses best_s;
        for (std::size_t i = 0; i < perms.size(); ++i) {
          const auto s = frame_sums(b, t, perms[i]);
          const double v = weighted(s, w);
          if (v < best) {
            best = v;
            best_i = i;
            best_s = s;
          }
        }
        r.best_perm[b * frames + t] = static_cast<double>(best_i);
        total.sed += best_s.sed;
        total.doa += best_s.doa;
        total.dist += best_s.dist;
      }
    }
    r.components = normalize(total);
    r.loss = weighted(total, w);
    return r;
  }
};

}  // namespace

LossWeights stage_schedule(Stage stage) {
  switch (stage) {
    case Stage::unified:
      return {25.0, 5.0, 1.0};
    case Stage::stage1:
      return {25.0, 5.0, 0.0};
    case Stage::stage2:
      return {25.0, 5.0, 3.0};
  }
  throw std::invalid_argument("unknown stage");
}

Stage parse_stage(const std::string& tag) {
  if (tag == "unified") return Stage::unified;
  if (tag == "stage1") return Stage::stage1;
  if (tag == "stage2") return Stage::stage2;
  throw std::invalid_argument("unknown stage tag '" + tag + "' (expected unified, stage1 or stage2)");
}

LossWeights stage_schedule(const std::string& tag) { return stage_schedule(parse_stage(tag)); }

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::unified:
      return "unified";
    case Stage::stage1:
      return "stage1";
    case Stage::stage2:
      return "stage2";
  }
  return "unknown";
}

FrameTargets stack_targets(const std::vector<FrameTargets>& items) {
  if (items.empty()) throw std::invalid_argument("stack_targets: no items");
  for (const auto& t : items) check_targets(t);
  auto stack = [&](auto member) {
    Shape s = (items[0].*member).shape();
    s[0] = 0;
    for (const auto& t : items) {
      Shape ts = (t.*member).shape();
      ts[0] = s[0];
      if (ts != s) throw std::invalid_argument("stack_targets: mismatched item shapes");
      s[0] += (t.*member).dim(0);
    }
    Tensor out(s);
    double* dst = out.ptr();
    for (const auto& t : items) dst = std::copy((t.*member).data().begin(), (t.*member).data().end(), dst);
    return out;
  };
  return {stack(&FrameTargets::sed), stack(&FrameTargets::doa), stack(&FrameTargets::dist),
          stack(&FrameTargets::active)};
}

FrameTargets permute_tracks(const FrameTargets& t, const Permutation& perm) {
  check_targets(t);
  check_perm(perm);
  auto apply = [&](const Tensor& src) {
    Tensor out(src.shape());
    const std::size_t batch = src.dim(0);
    const std::size_t inner = src.size() / (batch * kTracks);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < kTracks; ++i) {
        const double* from = src.ptr() + (b * kTracks + static_cast<std::size_t>(perm[i])) * inner;
        std::copy(from, from + inner, out.ptr() + (b * kTracks + i) * inner);
      }
    }
    return out;
  };
  return {apply(t.sed), apply(t.doa), apply(t.dist), apply(t.active)};
}

const std::array<Permutation, 6>& all_permutations() {
  static const std::array<Permutation, 6> perms{
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  return perms;
}

ComponentLosses component_losses(const TrackTensors& pred, const FrameTargets& tgt, const Permutation& perm) {
  check_pred(pred.sed.shape(), pred.doa.shape(), pred.dist.shape(), tgt);
  check_perm(perm);
  const Evaluator ev(pred.sed.ptr(), pred.doa.ptr(), pred.dist.ptr(), tgt);
  ComponentLosses total;
  for (std::size_t b = 0; b < tgt.batch(); ++b) {
    for (std::size_t t = 0; t < tgt.frames(); ++t) {
      const auto s = ev.frame_sums(b, t, perm);
      total.sed += s.sed;
      total.doa += s.doa;
      total.dist += s.dist;
    }
  }
  return ev.normalize(total);
}

PitResult pit_loss(const TrackTensors& pred, const FrameTargets& tgt, const LossWeights& w) {
  check_pred(pred.sed.shape(), pred.doa.shape(), pred.dist.shape(), tgt);
  return Evaluator(pred.sed.ptr(), pred.doa.ptr(), pred.dist.ptr(), tgt).run(w);
}

Var pit_loss(Var sed, Var doa, Var dist, const FrameTargets& tgt, const LossWeights& w,
             std::shared_ptr<PitResult> result) {
  check_pred(sed.shape(), doa.shape(), dist.shape(), tgt);
  if (!result) result = std::make_shared<PitResult>();
  auto targets = std::make_shared<FrameTargets>(tgt);
  return sed.graph->apply(
      "pit_loss", {sed, doa, dist}, {1},
      [targets, w, result](TensorRefs in, Tensor& out) {
        *result = Evaluator(in[0]->ptr(), in[1]->ptr(), in[2]->ptr(), *targets).run(w);
        out[0] = result->loss;
      },
      [targets, w, result](TensorRefs in, const Tensor&, const Tensor& gout, GradRefs gin) {
        const FrameTargets& tg = *targets;
        const Evaluator ev(in[0]->ptr(), in[1]->ptr(), in[2]->ptr(), tg);
        const double g = gout[0];
        const std::size_t classes = ev.classes;
        const auto& perms = all_permutations();
        for (std::size_t b = 0; b < tg.batch(); ++b) {
          for (std::size_t t = 0; t < ev.frames; ++t) {
            const auto& p = perms[static_cast<std::size_t>(result->best_perm[b * ev.frames + t])];
            for (std::size_t i = 0; i < kTracks; ++i) {
              const std::size_t pr = ev.row(b, i, t), tr = ev.row(b, static_cast<std::size_t>(p[i]), t);
              if (gin[0]) {
                for (std::size_t c = 0; c < classes; ++c) {
                  (*gin[0])[pr * classes + c] +=
                      g * w.sed / ev.n_sed * bce_grad(ev.sed[pr * classes + c], tg.sed[tr * classes + c]);
                }
              }
              if (tg.active[tr] <= 0.0) continue;
              if (gin[1]) {
                for (std::size_t k = 0; k < 3; ++k) {
                  (*gin[1])[pr * 3 + k] +=
                      g * w.doa * 2.0 * (ev.doa[pr * 3 + k] - tg.doa[tr * 3 + k]) / (3.0 * ev.n_active);
                }
              }
              if (gin[2]) {
                const double d = ev.dist[pr] - tg.dist[tr];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                (*gin[2])[pr] += g * w.dist * s / ev.n_active;
              }
            }
          }
        }
      });
}

}  // namespace seld
