#pragma once

// Synthetic FOA scenes, track-wise target encoding, segmenting, and the
// on-disk formats: label CSV, WAV clips and dataset manifests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "seld/features.hpp"
#include "seld/metrics.hpp"
#include "seld/objective.hpp"

namespace seld {

inline constexpr double kLabelFrame = 0.1;  // seconds per target frame

struct EventLabel {
  int cls = 0;
  double onset = 0.0;   // seconds
  double offset = 0.0;  // seconds
  double azimuth = 0.0;
  double elevation = 0.0;
  double distance = 1.0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  double duration = 5.0;
  double sample_rate = 24000.0;
  std::size_t n_events = 3;
  std::size_t n_classes = 13;
  std::size_t max_overlap = 3;
  double azimuth_min = -180.0, azimuth_max = 180.0;
  double elevation_min = -45.0, elevation_max = 45.0;
  double distance_min = 0.5, distance_max = 3.0;
  double snr_min_db = 20.0, snr_max_db = 30.0;
  /// Event durations, rounded to the label frame grid.
  double event_min = 1.0, event_max = 3.0;
};

struct Scene {
  FoaClip clip;
  std::vector<EventLabel> labels;
};

/// Events are Gaussian noise band-limited to a class carrier band (centres
/// log-spaced from 200 Hz to 0.4 sr), encoded with gains W = 1, X = cos(az) cos(el), Y = sin(az) cos(el),
/// Z = sin(el) and amplitude 1 / max(d, 0.3), plus diffuse noise whose level
/// is relative to a unit source at 1 m. Onsets and offsets lie on the frame grid.
Scene synth_scene(const SceneSpec& spec);

/// Frames [0, frames) of kLabelFrame seconds; an event covers frame t when its
/// interval contains the frame centre. Tracks are assigned in onset order
/// (ties by class id), each event taking the lowest track free for its span.
FrameTargets encode_targets(const std::vector<EventLabel>& events, std::size_t frames, std::size_t n_classes);
/// Targets from frame-level events carrying explicit track indices.
FrameTargets targets_from_events(const EventList& events, std::size_t n_classes);

struct Segment {
  FoaClip clip;
  std::vector<EventLabel> labels;  // clipped to the window, window-relative times
  FrameTargets targets;
};

/// Non-overlapping windows; the trailing remainder is zero-padded.
std::vector<Segment> segment(const FoaClip& clip, const std::vector<EventLabel>& labels, std::size_t n_classes,
                             double seconds = 5.0);

/// CSV rows "frame_100ms,class,track,azimuth_deg,elevation_deg,distance_m".
void write_labels(const std::filesystem::path& path, const EventList& events);
/// Frame count is max(frames, last labelled frame + 1).
EventList read_labels(const std::filesystem::path& path, std::size_t frames = 0);

/// 32-bit float WAV; reading also accepts 16-bit PCM.
void write_wav(const std::filesystem::path& path, const FoaClip& clip);
FoaClip read_wav(const std::filesystem::path& path);

struct ManifestEntry {
  std::filesystem::path clip;
  std::filesystem::path labels;
};

/// One "clip_path labels_path" pair per line; relative paths resolve
/// against the manifest's directory. '#' starts a comment.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Writes `count` synthetic segments (scene seeds base.seed + i) with labels
/// and a manifest.txt into `dir`. Returns the manifest path.
std::filesystem::path generate_dataset(const std::filesystem::path& dir, std::size_t count, const SceneSpec& base);

}  // namespace seld
