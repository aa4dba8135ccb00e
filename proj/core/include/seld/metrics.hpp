#pragma once

// SELD evaluation: per-frame class-wise matching, location-dependent F-score,
// class-dependent DoA error, relative distance error and SELD_score.

#include <string>
#include <vector>

#include "seld/objective.hpp"

namespace seld {

struct Event {
  int cls = 0;
  double azimuth = 0.0;    // degrees, [-180, 180)
  double elevation = 0.0;  // degrees, [-90, 90]
  double distance = 1.0;   // meters
  int track = -1;          // output track, when known
};

using FrameEvents = std::vector<Event>;
/// One entry per 100 ms frame.
using EventList = std::vector<FrameEvents>;

/// Great-circle angle in degrees between two (azimuth, elevation) directions.
double angular_error(double az1, double el1, double az2, double el2);

struct Match {
  std::size_t pred = 0;
  std::size_t ref = 0;
  double angle = 0.0;
};

struct FrameMatch {
  std::vector<Match> matches;
  std::vector<std::size_t> unmatched_pred;
  std::vector<std::size_t> unmatched_ref;
};

/// Minimum total angular error one-to-one assignment within each class.
FrameMatch match_events(const FrameEvents& pred, const FrameEvents& ref);

struct MetricOptions {
  double ang_thresh = 20.0;
  /// Relative distance error gate for true positives; <= 0 disables it.
  double dist_gate = 0.0;
  bool macro = false;
};

struct MetricReport {
  double f20 = 0.0;
  double doae = 180.0;
  double rde = 1.0;
  double seld_score = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  std::size_t matched = 0;
  /// DOAE and RDE fell back to their sentinels (no class-matched pairs).
  bool no_matches = true;

  std::string to_text() const;
  std::string to_json() const;
};

inline constexpr double kDoaeSentinel = 180.0;
inline constexpr double kRdeSentinel = 1.0;

MetricReport evaluate_events(const EventList& preds, const EventList& refs, const MetricOptions& opts = {});

double compute_f20(const EventList& preds, const EventList& refs, const MetricOptions& opts = {});
double compute_doae(const EventList& preds, const EventList& refs);
double compute_rde(const EventList& preds, const EventList& refs);

/// ((1 - f20) + doae / 180 + rde) / 3.
double seld_score(double f20, double doae_deg, double rde);

/// Unit Cartesian vector to (azimuth, elevation) in degrees.
void direction_to_angles(double x, double y, double z, double& az, double& el);

/// Per frame and track: an event when the top class probability exceeds
/// `threshold`, with the normalized DoA vector and the distance head.
EventList decode_tracks(const TrackTensors& out, std::size_t item, double threshold = 0.5);
/// Active target rows of one batch item as events.
EventList decode_targets(const FrameTargets& tgt, std::size_t item);

}  // namespace seld
