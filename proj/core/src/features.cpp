#include "seld/features.hpp"

#include <fftw3.h>

#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "seld/container.hpp"

namespace seld {

namespace {

constexpr double kLogFloor = 1e-10;
constexpr double kIvFloor = 1e-8;

// Slaney mel scale: linear below 1 kHz, logarithmic above.
constexpr double kMinLogHz = 1000.0;
constexpr double kLinStep = 200.0 / 3.0;
constexpr double kMinLogMel = kMinLogHz / kLinStep;
const double kLogStep = std::log(6.4) / 27.0;

double hz_to_mel(double hz) {
  return hz < kMinLogHz ? hz / kLinStep : kMinLogMel + std::log(hz / kMinLogHz) / kLogStep;
}

double mel_to_hz(double mel) {
  return mel < kMinLogMel ? mel * kLinStep : kMinLogHz * std::exp(kLogStep * (mel - kMinLogMel));
}

struct FftwPlan {
  std::size_t n;
  double* in;
  fftw_complex* out;
  fftw_plan plan;

  explicit FftwPlan(std::size_t size)
      : n(size),
        in(fftw_alloc_real(size)),
        out(fftw_alloc_complex(size / 2 + 1)),
        plan(fftw_plan_dft_r2c_1d(static_cast<int>(size), in, out, FFTW_ESTIMATE)) {}
  ~FftwPlan() {
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
};

void check_melbank(const Spectrogram& spec, const Tensor& melbank) {
  if (melbank.rank() != 2 || melbank.dim(1) != spec.bins) {
    throw std::invalid_argument("mel bank " + shape_str(melbank.shape()) + " does not match " +
                                std::to_string(spec.bins) + " spectral bins");
  }
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  Tensor out(s);
  std::copy(a.data().begin(), a.data().end(), out.ptr());
  std::copy(b.data().begin(), b.data().end(), out.ptr() + a.size());
  return out;
}

}  // namespace

std::string FeatureConfig::header() const {
  std::ostringstream os;
  os.precision(17);
  os << "sr=" << sample_rate << " n_fft=" << n_fft << " hop=" << hop << " n_mels=" << n_mels << " fmin=" << fmin
     << " fmax=" << fmax << " sde_use_ivs=" << (sde_use_ivs ? 1 : 0);
  return os.str();
}

Spectrogram stft(const FoaClip& clip, std::size_t n_fft, std::size_t hop) {
  if (n_fft < 2 || (n_fft & (n_fft - 1)) != 0) throw std::invalid_argument("stft: n_fft must be a power of two");
  if (hop == 0) throw std::invalid_argument("stft: hop must be positive");
  if (clip.samples.rank() != 2) throw std::invalid_argument("stft: clip must be (channels, samples)");
  const std::size_t len = clip.length();
  if (len < n_fft) {
    throw std::invalid_argument("stft: clip of " + std::to_string(len) + " samples is shorter than one window (" +
                                std::to_string(n_fft) + ")");
  }
  Spectrogram s;
  s.channels = clip.samples.dim(0);
  s.frames = len / hop;
  s.bins = n_fft / 2 + 1;
  s.data.resize(s.channels * s.frames * s.bins);

  std::vector<double> window(n_fft);
  for (std::size_t n = 0; n < n_fft; ++n) {
    window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(n_fft));
  }
  const auto pad = static_cast<std::ptrdiff_t>(n_fft / 2);
  const auto ilen = static_cast<std::ptrdiff_t>(len);
  auto reflect = [ilen](std::ptrdiff_t i) {
    if (i < 0) return -i;
    if (i >= ilen) return 2 * (ilen - 1) - i;
    return i;
  };

  FftwPlan fft(n_fft);
  for (std::size_t c = 0; c < s.channels; ++c) {
    const double* x = clip.samples.ptr() + c * len;
    for (std::size_t t = 0; t < s.frames; ++t) {
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * hop) - pad;
      for (std::size_t n = 0; n < n_fft; ++n) {
        fft.in[n] = x[reflect(start + static_cast<std::ptrdiff_t>(n))] * window[n];
      }
      fftw_execute(fft.plan);
      auto* dst = s.data.data() + (c * s.frames + t) * s.bins;
      for (std::size_t f = 0; f < s.bins; ++f) dst[f] = {fft.out[f][0], fft.out[f][1]};
    }
  }
  return s;
}

Tensor mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate, double fmin, double fmax) {
  const std::size_t bins = n_fft / 2 + 1;
  if (n_mels == 0 || n_mels > bins) throw std::invalid_argument("mel_filterbank: n_mels must be in [1, bins]");
  if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
    throw std::invalid_argument("mel_filterbank: need 0 <= fmin < fmax <= sample_rate / 2");
  }
  std::vector<double> edges(n_mels + 2);
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  Tensor bank({n_mels, bins});
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    const double norm = 2.0 / (right - left);
    double total = 0.0;
    for (std::size_t f = 0; f < bins; ++f) {
      const double hz = static_cast<double>(f) * sample_rate / static_cast<double>(n_fft);
      const double w = std::max(0.0, std::min((hz - left) / (center - left), (right - hz) / (right - center)));
      bank[m * bins + f] = w * norm;
      total += w;
    }
    if (total <= 0.0) {
      throw std::invalid_argument("mel_filterbank: band " + std::to_string(m) + " covers no spectral bin");
    }
  }
  return bank;
}

Tensor logmel(const Spectrogram& spec, const Tensor& melbank) {
  check_melbank(spec, melbank);
  const std::size_t n_mels = melbank.dim(0);
  Tensor out({spec.channels, spec.frames, n_mels});
  std::vector<double> power(spec.bins);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t t = 0; t < spec.frames; ++t) {
      for (std::size_t f = 0; f < spec.bins; ++f) power[f] = std::norm(spec.at(c, t, f));
      double* dst = out.ptr() + (c * spec.frames + t) * n_mels;
      for (std::size_t m = 0; m < n_mels; ++m) {
        const double* w = melbank.ptr() + m * spec.bins;
        double acc = 0.0;
        for (std::size_t f = 0; f < spec.bins; ++f) acc += w[f] * power[f];
        dst[m] = std::log(acc + kLogFloor);
      }
    }
  }
  return out;
}

Tensor logmel(const Spectrogram& spec, std::size_t n_mels, double fmin, double fmax, double sample_rate) {
  return logmel(spec, mel_filterbank(n_mels, (spec.bins - 1) * 2, sample_rate, fmin, fmax));
}

Tensor intensity_bins(const Spectrogram& spec) {
  if (spec.channels != 4) {
    throw std::invalid_argument("intensity_vectors: expected 4 FOA channels, got " + std::to_string(spec.channels));
  }
  Tensor iv({3, spec.frames, spec.bins});
  const std::size_t plane = spec.frames * spec.bins;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t f = 0; f < spec.bins; ++f) {
      const auto w = std::conj(spec.at(0, t, f));
      double v[3];
      for (std::size_t k = 0; k < 3; ++k) v[k] = (w * spec.at(k + 1, t, f)).real();
      const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + kIvFloor;
      for (std::size_t k = 0; k < 3; ++k) iv[k * plane + t * spec.bins + f] = v[k] / norm;
    }
  }
  return iv;
}

Tensor intensity_vectors(const Spectrogram& spec, const Tensor& melbank) {
  check_melbank(spec, melbank);
  const Tensor iv = intensity_bins(spec);
  const std::size_t n_mels = melbank.dim(0);
  Tensor out({3, spec.frames, n_mels});
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t t = 0; t < spec.frames; ++t) {
      const double* src = iv.ptr() + (k * spec.frames + t) * spec.bins;
      double* dst = out.ptr() + (k * spec.frames + t) * n_mels;
      for (std::size_t m = 0; m < n_mels; ++m) {
        const double* w = melbank.ptr() + m * spec.bins;
        double acc = 0.0;
        for (std::size_t f = 0; f < spec.bins; ++f) acc += w[f] * src[f];
        dst[m] = acc;
      }
    }
  }
  return out;
}

BranchFeatures assemble_branch_inputs(const FoaClip& clip, const FeatureConfig& cfg) {
  if (clip.samples.rank() != 2 || clip.samples.dim(0) != 4) {
    throw std::invalid_argument("assemble_branch_inputs: clip must have 4 channels, got " +
                                shape_str(clip.samples.shape()));
  }
  if (clip.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("assemble_branch_inputs: clip sample rate " + std::to_string(clip.sample_rate) +
                                " differs from configured " + std::to_string(cfg.sample_rate));
  }
  const Spectrogram spec = stft(clip, cfg.n_fft, cfg.hop);
  const Tensor bank = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax);
  BranchFeatures f;
  f.sed = logmel(spec, bank);
  f.doa = concat_channels(f.sed, intensity_vectors(spec, bank));
  f.sde = cfg.sde_use_ivs ? f.doa : f.sed;
  return f;
}

void save_feature_cache(const std::filesystem::path& path, const BranchFeatures& f, const FeatureConfig& cfg) {
  Container c;
  c.set_meta("features", cfg.header());
  c.put("sed", f.sed);
  c.put("doa", f.doa);
  c.put("sde", f.sde);
  write_container(path, c);
}

BranchFeatures load_feature_cache(const std::filesystem::path& path, const FeatureConfig& cfg) {
  const Container c = read_container(path);
  if (!c.has_meta("features") || c.meta("features") != cfg.header()) {
    throw std::runtime_error("feature cache " + path.string() + " was extracted with different parameters (" +
                             (c.has_meta("features") ? c.meta("features") : std::string("none")) + ")");
  }
  return {c.get("sed"), c.get("doa"), c.get("sde")};
}

}  // namespace seld
