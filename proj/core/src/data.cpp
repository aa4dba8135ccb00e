#include "seld/data.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace seld {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kFade = 0.005;  // seconds
constexpr std::size_t kTracks = 3;

std::size_t frames_for(double seconds) { return static_cast<std::size_t>(std::llround(seconds / kLabelFrame)); }

void direction(double az_deg, double el_deg, double v[3]) {
  const double az = az_deg * kPi / 180.0, el = el_deg * kPi / 180.0;
  v[0] = std::cos(az) * std::cos(el);
  v[1] = std::sin(az) * std::cos(el);
  v[2] = std::sin(el);
}

// Frame span [first, last) whose centres fall inside [onset, offset).
std::pair<std::size_t, std::size_t> frame_span(const EventLabel& e, std::size_t frames) {
  const double lo = std::ceil(e.onset / kLabelFrame - 0.5 - 1e-9);
  const double hi = std::ceil(e.offset / kLabelFrame - 0.5 - 1e-9);
  const auto first = static_cast<std::size_t>(std::clamp(lo, 0.0, static_cast<double>(frames)));
  const auto last = static_cast<std::size_t>(std::clamp(hi, 0.0, static_cast<double>(frames)));
  return {first, std::max(first, last)};
}

// Class carrier band: centres log-spaced from 200 Hz to 0.4 sr, each band
// spanning a third of the log gap to its neighbours on either side.
std::pair<double, double> class_band(int cls, std::size_t n_classes, double sr) {
  const double lo = 200.0, hi = 0.4 * sr;
  const double step = std::log(hi / lo) / static_cast<double>(n_classes);
  const double centre = lo * std::exp(step * (static_cast<double>(cls) + 0.5));
  const double half = std::exp(step / 3.0);
  return {centre / half, centre * half};
}

// Gaussian noise restricted to the class band, unit RMS over the event,
// with raised-cosine fades at both ends.
void add_band(std::vector<double>& out, std::size_t start, std::size_t len, int cls, std::size_t n_classes, double sr,
              double gain, std::mt19937_64& rng) {
  const auto [f_lo, f_hi] = class_band(cls, n_classes, sr);
  const std::size_t bins = len / 2 + 1;
  double* x = fftw_alloc_real(len);
  fftw_complex* spec = fftw_alloc_complex(bins);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t k = 0; k < bins; ++k) {
    const double f = static_cast<double>(k) * sr / static_cast<double>(len);
    const bool in_band = f >= f_lo && f <= f_hi;
    const double re = g(rng), im = g(rng);
    spec[k][0] = in_band ? re : 0.0;
    spec[k][1] = in_band ? im : 0.0;
  }
  fftw_plan plan = fftw_plan_dft_c2r_1d(static_cast<int>(len), spec, x, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  double power = 0.0;
  for (std::size_t n = 0; n < len; ++n) power += x[n] * x[n];
  const double norm = power > 0.0 ? gain / std::sqrt(power / static_cast<double>(len)) : 0.0;
  const auto fade = std::max<std::size_t>(1, static_cast<std::size_t>(kFade * sr));
  for (std::size_t n = 0; n < len; ++n) {
    double env = 1.0;
    if (n < fade) env = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(n) / static_cast<double>(fade));
    if (len - n <= fade) env = std::min(env, 0.5 - 0.5 * std::cos(kPi * static_cast<double>(len - n) / static_cast<double>(fade)));
    out[start + n] += norm * env * x[n];
  }
  fftw_free(spec);
  fftw_free(x);
}

std::string fmt4(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  std::string s = os.str();
  if (s == "-0.0000") s = "0.0000";
  return s;
}

[[noreturn]] void label_error(const std::filesystem::path& path, std::size_t line, const std::string& msg) {
  throw std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + msg);
}

void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t get_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

}  // namespace

Scene synth_scene(const SceneSpec& spec) {
  if (spec.duration <= 0.0 || spec.sample_rate <= 0.0) throw std::invalid_argument("synth_scene: bad duration/rate");
  if (spec.n_classes == 0) throw std::invalid_argument("synth_scene: n_classes must be positive");
  if (spec.max_overlap == 0 || spec.max_overlap > kTracks) {
    throw std::invalid_argument("synth_scene: max_overlap must be in [1, 3]");
  }
  if (spec.distance_min <= 0.0 || spec.distance_max < spec.distance_min || spec.azimuth_max < spec.azimuth_min ||
      spec.elevation_max < spec.elevation_min || spec.snr_max_db < spec.snr_min_db ||
      spec.event_max < spec.event_min || spec.event_min <= 0.0) {
    throw std::invalid_argument("synth_scene: invalid ranges");
  }
  std::mt19937_64 rng(spec.seed);
  const auto len = static_cast<std::size_t>(std::llround(spec.duration * spec.sample_rate));
  const std::size_t frames = frames_for(spec.duration);
  const std::size_t min_f = std::max<std::size_t>(1, frames_for(spec.event_min));
  const std::size_t max_f = std::min(frames, std::max(min_f, frames_for(spec.event_max)));
  if (min_f > frames) throw std::invalid_argument("synth_scene: events longer than the scene");

  std::uniform_int_distribution<int> cls_d(0, static_cast<int>(spec.n_classes) - 1);
  std::uniform_int_distribution<std::size_t> dur_d(min_f, max_f);
  std::uniform_real_distribution<double> az_d(spec.azimuth_min, spec.azimuth_max);
  std::uniform_real_distribution<double> el_d(spec.elevation_min, spec.elevation_max);
  std::uniform_real_distribution<double> dist_d(spec.distance_min, spec.distance_max);
  std::uniform_real_distribution<double> snr_d(spec.snr_min_db, spec.snr_max_db);

  Scene scene;
  std::vector<std::size_t> occupancy(frames, 0);
  for (std::size_t i = 0; i < spec.n_events; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const std::size_t dur = dur_d(rng);
      std::vector<std::size_t> starts;
      for (std::size_t s = 0; s + dur <= frames; ++s) {
        if (std::none_of(occupancy.begin() + static_cast<std::ptrdiff_t>(s),
                         occupancy.begin() + static_cast<std::ptrdiff_t>(s + dur),
                         [&](std::size_t o) { return o >= spec.max_overlap; })) {
          starts.push_back(s);
        }
      }
      if (starts.empty()) continue;
      const std::size_t start = starts[std::uniform_int_distribution<std::size_t>(0, starts.size() - 1)(rng)];
      for (std::size_t t = start; t < start + dur; ++t) ++occupancy[t];
      EventLabel e;
      e.cls = cls_d(rng);
      e.onset = static_cast<double>(start) * kLabelFrame;
      e.offset = static_cast<double>(start + dur) * kLabelFrame;
      e.azimuth = az_d(rng);
      if (e.azimuth >= 180.0) e.azimuth -= 360.0;
      e.elevation = el_d(rng);
      e.distance = dist_d(rng);
      scene.labels.push_back(e);
      placed = true;
    }
    if (!placed) {
      throw std::invalid_argument("synth_scene: cannot place event " + std::to_string(i) + " within the overlap limit");
    }
  }

  scene.clip.sample_rate = spec.sample_rate;
  scene.clip.samples = Tensor({4, len});
  std::vector<double> source(len);
  for (const EventLabel& e : scene.labels) {
    std::fill(source.begin(), source.end(), 0.0);
    const auto s0 = static_cast<std::size_t>(std::llround(e.onset * spec.sample_rate));
    const auto s1 = std::min(len, static_cast<std::size_t>(std::llround(e.offset * spec.sample_rate)));
    add_band(source, s0, s1 - s0, e.cls, spec.n_classes, spec.sample_rate, 1.0 / std::max(e.distance, 0.3), rng);
    double v[3];
    direction(e.azimuth, e.elevation, v);
    const double gains[4] = {1.0, v[0], v[1], v[2]};
    for (std::size_t c = 0; c < 4; ++c) {
      double* dst = scene.clip.samples.ptr() + c * len;
      for (std::size_t n = s0; n < s1; ++n) dst[n] += gains[c] * source[n];
    }
  }
  const double sigma = std::pow(10.0, -snr_d(rng) / 20.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < 4; ++c) {
    const double s = c == 0 ? sigma : sigma / std::sqrt(3.0);
    double* dst = scene.clip.samples.ptr() + c * len;
    for (std::size_t n = 0; n < len; ++n) dst[n] += s * noise(rng);
  }
  return scene;
}

FrameTargets encode_targets(const std::vector<EventLabel>& events, std::size_t frames, std::size_t n_classes) {
  if (frames == 0 || n_classes == 0) throw std::invalid_argument("encode_targets: frames and classes must be positive");
  FrameTargets t{Tensor({1, kTracks, frames, n_classes}), Tensor({1, kTracks, frames, 3}),
                 Tensor({1, kTracks, frames, 1}), Tensor({1, kTracks, frames})};
  std::vector<std::size_t> order(events.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const EventLabel& e = events[i];
    if (!(e.onset < e.offset)) throw std::invalid_argument("encode_targets: onset must precede offset");
    if (!(e.distance > 0.0)) throw std::invalid_argument("encode_targets: distance must be positive");
    if (e.cls < 0 || static_cast<std::size_t>(e.cls) >= n_classes) {
      throw std::invalid_argument("encode_targets: class " + std::to_string(e.cls) + " out of range");
    }
    order[i] = i;
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (events[a].onset != events[b].onset) return events[a].onset < events[b].onset;
    return events[a].cls < events[b].cls;
  });
  for (std::size_t i : order) {
    const EventLabel& e = events[i];
    const auto [first, last] = frame_span(e, frames);
    if (first == last) continue;
    std::size_t track = kTracks;
    for (std::size_t k = 0; k < kTracks && track == kTracks; ++k) {
      bool free = true;
      for (std::size_t f = first; f < last && free; ++f) free = t.active[k * frames + f] == 0.0;
      if (free) track = k;
    }
    if (track == kTracks) {
      throw std::invalid_argument("encode_targets: more than 3 simultaneous events near frame " +
                                  std::to_string(first));
    }
    double v[3];
    direction(e.azimuth, e.elevation, v);
    for (std::size_t f = first; f < last; ++f) {
      const std::size_t row = track * frames + f;
      t.active[row] = 1.0;
      t.sed[row * n_classes + static_cast<std::size_t>(e.cls)] = 1.0;
      for (int k = 0; k < 3; ++k) t.doa[row * 3 + k] = v[k];
      t.dist[row] = e.distance;
    }
  }
  return t;
}

FrameTargets targets_from_events(const EventList& events, std::size_t n_classes) {
  const std::size_t frames = events.size();
  if (frames == 0) throw std::invalid_argument("targets_from_events: no frames");
  FrameTargets t{Tensor({1, kTracks, frames, n_classes}), Tensor({1, kTracks, frames, 3}),
                 Tensor({1, kTracks, frames, 1}), Tensor({1, kTracks, frames})};
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t i = 0; i < events[f].size(); ++i) {
      const Event& e = events[f][i];
      const int track = e.track >= 0 ? e.track : static_cast<int>(i);
      if (track >= static_cast<int>(kTracks)) {
        throw std::invalid_argument("targets_from_events: track " + std::to_string(track) + " at frame " +
                                    std::to_string(f));
      }
      if (e.cls < 0 || static_cast<std::size_t>(e.cls) >= n_classes) {
        throw std::invalid_argument("targets_from_events: class " + std::to_string(e.cls) + " out of range");
      }
      const std::size_t row = static_cast<std::size_t>(track) * frames + f;
      if (t.active[row] != 0.0) {
        throw std::invalid_argument("targets_from_events: track " + std::to_string(track) + " used twice at frame " +
                                    std::to_string(f));
      }
      double v[3];
      direction(e.azimuth, e.elevation, v);
      t.active[row] = 1.0;
      t.sed[row * n_classes + static_cast<std::size_t>(e.cls)] = 1.0;
      for (int k = 0; k < 3; ++k) t.doa[row * 3 + k] = v[k];
      t.dist[row] = e.distance;
    }
  }
  return t;
}

std::vector<Segment> segment(const FoaClip& clip, const std::vector<EventLabel>& labels, std::size_t n_classes,
                             double seconds) {
  const auto window = static_cast<std::size_t>(std::llround(seconds * clip.sample_rate));
  if (window == 0) throw std::invalid_argument("segment: window must be positive");
  const std::size_t channels = clip.samples.dim(0), len = clip.length();
  const std::size_t count = std::max<std::size_t>(1, (len + window - 1) / window);
  std::vector<Segment> out;
  for (std::size_t s = 0; s < count; ++s) {
    Segment seg;
    seg.clip.sample_rate = clip.sample_rate;
    seg.clip.samples = Tensor({channels, window});
    const std::size_t begin = s * window, end = std::min(len, begin + window);
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy(clip.samples.ptr() + c * len + begin, clip.samples.ptr() + c * len + end,
                seg.clip.samples.ptr() + c * window);
    }
    const double t0 = static_cast<double>(s) * seconds, t1 = t0 + seconds;
    for (EventLabel e : labels) {
      if (e.offset <= t0 || e.onset >= t1) continue;
      e.onset = std::max(e.onset, t0) - t0;
      e.offset = std::min(e.offset, t1) - t0;
      seg.labels.push_back(e);
    }
    seg.targets = encode_targets(seg.labels, frames_for(seconds), n_classes);
    out.push_back(std::move(seg));
  }
  return out;
}

void write_labels(const std::filesystem::path& path, const EventList& events) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write labels to " + path.string());
  os << "frame_100ms,class,track,azimuth_deg,elevation_deg,distance_m\n";
  for (std::size_t f = 0; f < events.size(); ++f) {
    for (std::size_t i = 0; i < events[f].size(); ++i) {
      const Event& e = events[f][i];
      os << f << ',' << e.cls << ',' << (e.track >= 0 ? e.track : static_cast<int>(i)) << ',' << fmt4(e.azimuth)
         << ',' << fmt4(e.elevation) << ',' << fmt4(e.distance) << '\n';
    }
  }
  if (!os) throw std::runtime_error("failed writing labels to " + path.string());
}

EventList read_labels(const std::filesystem::path& path, std::size_t frames) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read labels from " + path.string());
  EventList events(frames);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("frame", 0) == 0) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 6) {
      label_error(path, lineno, "expected 6 fields, got " + std::to_string(fields.size()));
    }
    long frame = 0, cls = 0, track = 0;
    double v[3];
    try {
      std::size_t used = 0;
      frame = std::stol(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("frame");
      cls = std::stol(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("class");
      track = std::stol(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("track");
      for (int k = 0; k < 3; ++k) {
        v[k] = std::stod(fields[3 + static_cast<std::size_t>(k)], &used);
        if (used != fields[3 + static_cast<std::size_t>(k)].size()) throw std::invalid_argument("value");
      }
    } catch (const std::exception&) {
      label_error(path, lineno, "malformed row '" + line + "'");
    }
    if (frame < 0) label_error(path, lineno, "negative frame index");
    if (cls < 0) label_error(path, lineno, "negative class id");
    if (track < 0 || track >= static_cast<long>(kTracks)) label_error(path, lineno, "track must be 0, 1 or 2");
    if (!(v[2] > 0.0)) label_error(path, lineno, "distance must be positive");
    if (v[1] < -90.0 || v[1] > 90.0) label_error(path, lineno, "elevation out of range");
    const auto f = static_cast<std::size_t>(frame);
    if (f >= events.size()) events.resize(f + 1);
    events[f].push_back({static_cast<int>(cls), v[0], v[1], v[2], static_cast<int>(track)});
  }
  return events;
}

void write_wav(const std::filesystem::path& path, const FoaClip& clip) {
  const std::size_t channels = clip.samples.dim(0), len = clip.length();
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(channels * len * 4);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("RIFF", 4);
  put_u32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put_u32(os, 16);
  put_u16(os, 3);
  put_u16(os, static_cast<std::uint16_t>(channels));
  const auto sr = static_cast<std::uint32_t>(std::llround(clip.sample_rate));
  put_u32(os, sr);
  put_u32(os, sr * static_cast<std::uint32_t>(channels) * 4);
  put_u16(os, static_cast<std::uint16_t>(channels * 4));
  put_u16(os, 32);
  os.write("data", 4);
  put_u32(os, data_bytes);
  for (std::size_t n = 0; n < len; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const auto v = static_cast<float>(clip.samples[c * len + n]);
      put_u32(os, std::bit_cast<std::uint32_t>(v));
    }
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

FoaClip read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& msg) { throw std::runtime_error(path.string() + ": " + msg); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    fail("not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  for (std::size_t pos = 12; pos + 8 <= bytes.size();) {
    const std::uint32_t size = get_u32(bytes.data() + pos + 4);
    const unsigned char* body = bytes.data() + pos + 8;
    if (pos + 8 + size > bytes.size()) fail("truncated chunk");
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (size < 16) fail("short fmt chunk");
      format = get_u16(body);
      channels = get_u16(body + 2);
      rate = get_u32(body + 4);
      bits = get_u16(body + 14);
      if (format == 0xfffe && size >= 26) format = get_u16(body + 24);
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      data = body;
      data_len = size;
    }
    pos += 8 + size + (size & 1);
  }
  if (!data || channels == 0) fail("missing fmt or data chunk");
  const bool f32 = format == 3 && bits == 32, pcm16 = format == 1 && bits == 16;
  if (!f32 && !pcm16) fail("unsupported sample format (need 32-bit float or 16-bit PCM)");
  const std::size_t width = bits / 8, frames = data_len / (width * channels);
  if (frames == 0) fail("no samples");
  FoaClip clip{Tensor({channels, frames}), static_cast<double>(rate)};
  for (std::size_t n = 0; n < frames; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + (n * channels + c) * width;
      clip.samples[c * frames + n] = f32 ? static_cast<double>(std::bit_cast<float>(get_u32(p)))
                                         : static_cast<double>(static_cast<std::int16_t>(get_u16(p))) / 32768.0;
    }
  }
  return clip;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::string clip, labels, extra;
    if (!(ss >> clip)) continue;
    if (!(ss >> labels) || (ss >> extra)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected '<clip> <labels>'");
    }
    auto resolve = [&](const std::string& p) {
      std::filesystem::path q(p);
      return q.is_absolute() ? q : base / q;
    };
    entries.push_back({resolve(clip), resolve(labels)});
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& e : entries) os << e.clip.string() << ' ' << e.labels.string() << '\n';
}

std::filesystem::path generate_dataset(const std::filesystem::path& dir, std::size_t count, const SceneSpec& base) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec spec = base;
    spec.seed = base.seed + i;
    const Scene scene = synth_scene(spec);
    std::ostringstream name;
    name << "seg_" << std::setw(4) << std::setfill('0') << i;
    const std::string wav = name.str() + ".wav", csv = name.str() + ".csv";
    write_wav(dir / wav, scene.clip);
    const auto targets = encode_targets(scene.labels, frames_for(spec.duration), spec.n_classes);
    write_labels(dir / csv, decode_targets(targets, 0));
    entries.push_back({wav, csv});
  }
  const auto manifest = dir / "manifest.txt";
  write_manifest(manifest, entries);
  return manifest;
}

}  // namespace seld
