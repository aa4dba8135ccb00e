#pragma once

// FOA waveform features: STFT, log-mel spectrogram and intensity vectors,
// routed per branch. Channels are in ACN order (W, X, Y, Z).

#include <complex>
#include <filesystem>
#include <string>
#include <vector>

#include "seld/tensor.hpp"

namespace seld {

struct FoaClip {
  Tensor samples;  // (4, L)
  double sample_rate = 24000.0;

  std::size_t length() const { return samples.dim(1); }
};

struct FeatureConfig {
  double sample_rate = 24000.0;
  std::size_t n_fft = 1024;
  std::size_t hop = 300;
  std::size_t n_mels = 128;
  double fmin = 20.0;
  double fmax = 12000.0;
  bool sde_use_ivs = false;

  /// Canonical one-line description used to validate feature caches.
  std::string header() const;
};

/// One-sided complex spectrogram, (channels, frames, bins) row-major.
struct Spectrogram {
  std::size_t channels = 0;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> data;

  const std::complex<double>& at(std::size_t c, std::size_t t, std::size_t f) const {
    return data[(c * frames + t) * bins + f];
  }
};

/// Periodic Hann window, centered frames with reflect padding, T = floor(L / hop).
Spectrogram stft(const FoaClip& clip, std::size_t n_fft, std::size_t hop);

/// Slaney-scale triangular filters, area normalized: (n_mels, n_fft / 2 + 1).
Tensor mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate, double fmin, double fmax);

/// log(melbank * |X|^2 + 1e-10) per channel: (C, T, n_mels).
Tensor logmel(const Spectrogram& spec, const Tensor& melbank);
Tensor logmel(const Spectrogram& spec, std::size_t n_mels, double fmin, double fmax, double sample_rate);

/// Unit-normalized active intensity Re{conj(W) (X, Y, Z)} / (|I| + 1e-8)
/// per bin, before the mel projection: (3, T, bins).
Tensor intensity_bins(const Spectrogram& spec);
/// intensity_bins projected through the mel bank: (3, T, n_mels).
Tensor intensity_vectors(const Spectrogram& spec, const Tensor& melbank);

struct BranchFeatures {
  Tensor sed;  // (4, T, F)
  Tensor doa;  // (7, T, F)
  Tensor sde;  // (4 or 7, T, F)
};

BranchFeatures assemble_branch_inputs(const FoaClip& clip, const FeatureConfig& cfg);

void save_feature_cache(const std::filesystem::path& path, const BranchFeatures& f, const FeatureConfig& cfg);
/// Throws when the cached extraction parameters differ from `cfg`.
BranchFeatures load_feature_cache(const std::filesystem::path& path, const FeatureConfig& cfg);

}  // namespace seld
