#include "seld/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace seld {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

void unit_vector(double az, double el, double v[3]) {
  v[0] = std::cos(az * kDeg) * std::cos(el * kDeg);
  v[1] = std::sin(az * kDeg) * std::cos(el * kDeg);
  v[2] = std::sin(el * kDeg);
}

// Best injective assignment of the smaller index set into the larger one.
void best_assignment(const std::vector<std::vector<double>>& cost, std::vector<std::pair<std::size_t, std::size_t>>& out) {
  const std::size_t rows = cost.size(), cols = rows ? cost[0].size() : 0;
  const bool transpose = rows > cols;
  const std::size_t small = transpose ? cols : rows, large = transpose ? rows : cols;
  auto at = [&](std::size_t s, std::size_t l) { return transpose ? cost[l][s] : cost[s][l]; };
  std::vector<std::size_t> pick(small), best_pick;
  std::vector<bool> used(large, false);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, double)> search = [&](std::size_t s, double acc) {
    if (acc >= best) return;
    if (s == small) {
      best = acc;
      best_pick = pick;
      return;
    }
    for (std::size_t l = 0; l < large; ++l) {
      if (used[l]) continue;
      used[l] = true;
      pick[s] = l;
      search(s + 1, acc + at(s, l));
      used[l] = false;
    }
  };
  search(0, 0.0);
  out.clear();
  for (std::size_t s = 0; s < small; ++s) {
    if (transpose) {
      out.emplace_back(best_pick[s], s);
    } else {
      out.emplace_back(s, best_pick[s]);
    }
  }
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

double f_score(const Counts& c) {
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

void check_aligned(const EventList& preds, const EventList& refs) {
  if (preds.size() != refs.size()) {
    throw std::invalid_argument("metrics: prediction has " + std::to_string(preds.size()) + " frames, reference " +
                                std::to_string(refs.size()));
  }
}

}  // namespace

double angular_error(double az1, double el1, double az2, double el2) {
  double a[3], b[3];
  unit_vector(az1, el1, a);
  unit_vector(az2, el2, b);
  const double cx = a[1] * b[2] - a[2] * b[1];
  const double cy = a[2] * b[0] - a[0] * b[2];
  const double cz = a[0] * b[1] - a[1] * b[0];
  const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
  return std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) / kDeg;
}

FrameMatch match_events(const FrameEvents& pred, const FrameEvents& ref) {
  std::map<int, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_class;
  for (std::size_t i = 0; i < pred.size(); ++i) by_class[pred[i].cls].first.push_back(i);
  for (std::size_t j = 0; j < ref.size(); ++j) by_class[ref[j].cls].second.push_back(j);

  FrameMatch m;
  for (const auto& [cls, idx] : by_class) {
    const auto& [pi, ri] = idx;
    std::vector<bool> pred_used(pi.size(), false), ref_used(ri.size(), false);
    if (!pi.empty() && !ri.empty()) {
      std::vector<std::vector<double>> cost(pi.size(), std::vector<double>(ri.size()));
      for (std::size_t a = 0; a < pi.size(); ++a) {
        for (std::size_t b = 0; b < ri.size(); ++b) {
          const Event& p = pred[pi[a]];
          const Event& r = ref[ri[b]];
          cost[a][b] = angular_error(p.azimuth, p.elevation, r.azimuth, r.elevation);
        }
      }
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      best_assignment(cost, pairs);
      for (auto [a, b] : pairs) {
        m.matches.push_back({pi[a], ri[b], cost[a][b]});
        pred_used[a] = ref_used[b] = true;
      }
    }
    for (std::size_t a = 0; a < pi.size(); ++a) {
      if (!pred_used[a]) m.unmatched_pred.push_back(pi[a]);
    }
    for (std::size_t b = 0; b < ri.size(); ++b) {
      if (!ref_used[b]) m.unmatched_ref.push_back(ri[b]);
    }
  }
  return m;
}

MetricReport evaluate_events(const EventList& preds, const EventList& refs, const MetricOptions& opts) {
  check_aligned(preds, refs);
  std::map<int, Counts> per_class;
  Counts total;
  double ang_sum = 0.0, rel_sum = 0.0;
  std::size_t matched = 0;
  for (std::size_t t = 0; t < refs.size(); ++t) {
    for (const Event& r : refs[t]) {
      if (!(r.distance > 0.0)) throw std::invalid_argument("metrics: reference distance must be positive");
    }
    const FrameMatch m = match_events(preds[t], refs[t]);
    for (const Match& mt : m.matches) {
      const Event& p = preds[t][mt.pred];
      const Event& r = refs[t][mt.ref];
      const double rel = std::abs(p.distance - r.distance) / r.distance;
      ang_sum += mt.angle;
      rel_sum += rel;
      ++matched;
      Counts& c = per_class[r.cls];
      const bool ok = mt.angle <= opts.ang_thresh && (opts.dist_gate <= 0.0 || rel <= opts.dist_gate);
      if (ok) {
        ++c.tp;
      } else {
        ++c.fp;
        ++c.fn;
      }
    }
    for (std::size_t i : m.unmatched_pred) ++per_class[preds[t][i].cls].fp;
    for (std::size_t j : m.unmatched_ref) ++per_class[refs[t][j].cls].fn;
  }
  for (const auto& [cls, c] : per_class) {
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
  }

  MetricReport rep;
  rep.tp = total.tp;
  rep.fp = total.fp;
  rep.fn = total.fn;
  rep.matched = matched;
  if (opts.macro && !per_class.empty()) {
    double acc = 0.0;
    for (const auto& [cls, c] : per_class) acc += f_score(c);
    rep.f20 = acc / static_cast<double>(per_class.size());
  } else {
    rep.f20 = f_score(total);
  }
  rep.no_matches = matched == 0;
  rep.doae = rep.no_matches ? kDoaeSentinel : ang_sum / static_cast<double>(matched);
  rep.rde = rep.no_matches ? kRdeSentinel : rel_sum / static_cast<double>(matched);
  rep.seld_score = seld_score(rep.f20, rep.doae, rep.rde);
  return rep;
}

double compute_f20(const EventList& preds, const EventList& refs, const MetricOptions& opts) {
  return evaluate_events(preds, refs, opts).f20;
}

double compute_doae(const EventList& preds, const EventList& refs) { return evaluate_events(preds, refs).doae; }

double compute_rde(const EventList& preds, const EventList& refs) { return evaluate_events(preds, refs).rde; }

double seld_score(double f20, double doae_deg, double rde) {
  if (!(f20 >= 0.0 && f20 <= 1.0)) throw std::invalid_argument("seld_score: F20 must be in [0, 1]");
  if (!(doae_deg >= 0.0 && doae_deg <= 180.0)) throw std::invalid_argument("seld_score: DOAE must be in [0, 180]");
  if (!(rde >= 0.0)) throw std::invalid_argument("seld_score: RDE must be nonnegative");
  return ((1.0 - f20) + doae_deg / 180.0 + rde) / 3.0;
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "F20        " << f20 << "\n";
  os << "DOAE       " << doae << (no_matches ? " (no matches)" : "") << "\n";
  os << "RDE        " << rde << (no_matches ? " (no matches)" : "") << "\n";
  os << "SELD_score " << seld_score << "\n";
  os << "TP " << tp << "  FP " << fp << "  FN " << fn << "  matched " << matched << "\n";
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::json j{{"f20", f20},          {"doae", doae}, {"rde", rde}, {"seld_score", seld_score},
                   {"tp", tp},            {"fp", fp},     {"fn", fn},   {"matched", matched},
                   {"no_matches", no_matches}};
  return j.dump(2);
}

void direction_to_angles(double x, double y, double z, double& az, double& el) {
  az = std::atan2(y, x) / kDeg;
  el = std::atan2(z, std::hypot(x, y)) / kDeg;
  if (az >= 180.0) az -= 360.0;
}

EventList decode_tracks(const TrackTensors& out, std::size_t item, double threshold) {
  const std::size_t tracks = out.sed.dim(1), frames = out.sed.dim(2), classes = out.sed.dim(3);
  EventList events(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < tracks; ++k) {
      const std::size_t row = (item * tracks + k) * frames + t;
      const double* p = out.sed.ptr() + row * classes;
      const auto best = static_cast<std::size_t>(std::max_element(p, p + classes) - p);
      if (!(p[best] > threshold)) continue;
      const double* d = out.doa.ptr() + row * 3;
      Event e;
      e.cls = static_cast<int>(best);
      direction_to_angles(d[0], d[1], d[2], e.azimuth, e.elevation);
      e.distance = out.dist[row];
      e.track = static_cast<int>(k);
      events[t].push_back(e);
    }
  }
  return events;
}

EventList decode_targets(const FrameTargets& tgt, std::size_t item) {
  const std::size_t frames = tgt.frames(), classes = tgt.classes();
  EventList events(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t row = (item * 3 + k) * frames + t;
      if (tgt.active[row] <= 0.0) continue;
      const double* s = tgt.sed.ptr() + row * classes;
      const double* d = tgt.doa.ptr() + row * 3;
      Event e;
      e.cls = static_cast<int>(std::max_element(s, s + classes) - s);
      direction_to_angles(d[0], d[1], d[2], e.azimuth, e.elevation);
      e.distance = tgt.dist[row];
      e.track = static_cast<int>(k);
      events[t].push_back(e);
    }
  }
  return events;
}

}  // namespace seld
