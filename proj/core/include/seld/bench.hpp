#pragma once

// Sequence-length scaling of the selective scan.

#include <cstdint>
#include <string>
#include <vector>

namespace seld {

struct ScalingRow {
  std::size_t length = 0;
  double median_seconds = 0.0;
  std::vector<double> samples;
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  double exponent = 0.0;  // least-squares slope of log time against log length

  std::string to_text() const;
  std::string to_json() const;
};

struct ScalingOptions {
  std::vector<std::size_t> lengths{1024, 2048, 4096, 8192};
  std::size_t repeats = 5;
  std::size_t channels = 64;  // E
  std::size_t state = 16;     // N
  std::uint64_t seed = 0;
};

/// Times scan_forward (batch 1) `repeats` times at each length after one
/// warm-up run and keeps the median.
ScalingReport scan_scaling(const ScalingOptions& opts = {});

/// Slope of the least-squares line through (log x, log y).
double fit_exponent(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace seld
