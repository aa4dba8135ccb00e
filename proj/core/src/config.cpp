#include "seld/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace seld {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw std::invalid_argument(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument(key + ": expected true or false, got '" + v + "'");
}

struct Entry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Entry real(std::string key, T RunConfig::*section, double T::*field) {
  return {key, [=](const RunConfig& c) { return fmt(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = to_double(key, v); }};
}

template <typename T, typename U>
Entry integer(std::string key, T RunConfig::*section, U T::*field) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = static_cast<U>(to_uint(key, v)); }};
}

template <typename T>
Entry flag(std::string key, T RunConfig::*section, bool T::*field) {
  return {key, [=](const RunConfig& c) { return std::string(c.*section.*field ? "true" : "false"); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = to_bool(key, v); }};
}

template <typename T>
Entry text(std::string key, T RunConfig::*section, std::string T::*field) {
  return {key, [=](const RunConfig& c) { return c.*section.*field; },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = v; }};
}

Entry synth_real(std::string key, double SceneSpec::*field) {
  return {key, [=](const RunConfig& c) { return fmt(c.data.synth.*field); },
          [=](RunConfig& c, const std::string& v) { c.data.synth.*field = to_double(key, v); }};
}

Entry synth_uint(std::string key, std::size_t SceneSpec::*field) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.data.synth.*field); },
          [=](RunConfig& c, const std::string& v) { c.data.synth.*field = to_uint(key, v); }};
}

const std::vector<Entry>& entries() {
  using M = ModelConfig;
  using F = FeatureConfig;
  using O = OptimConfig;
  using T = TrainConfig;
  using D = DataConfig;
  static const std::vector<Entry> table = [] {
    std::vector<Entry> e;
    e.push_back(integer("model.n_classes", &RunConfig::model, &M::n_classes));
    e.push_back({"model.conv_channels",
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < 4; ++i) s += (i ? "," : "") + std::to_string(c.model.conv_channels[i]);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   std::stringstream ss(v);
                   std::string item;
                   std::vector<std::size_t> vals;
                   while (std::getline(ss, item, ',')) vals.push_back(to_uint("model.conv_channels", trim(item)));
                   if (vals.size() != 4) throw std::invalid_argument("model.conv_channels: expected four widths");
                   std::copy(vals.begin(), vals.end(), c.model.conv_channels.begin());
                 }});
    e.push_back(integer("model.d_model", &RunConfig::model, &M::d_model));
    e.push_back(integer("model.d_state", &RunConfig::model, &M::d_state));
    e.push_back(integer("model.expand", &RunConfig::model, &M::expand));
    e.push_back(integer("model.conv_kernel", &RunConfig::model, &M::conv_kernel));
    e.push_back(integer("model.dt_rank", &RunConfig::model, &M::dt_rank));
    e.push_back({"model.discretization",
                 [](const RunConfig& c) {
                   return std::string(c.model.discretization == Discretization::zoh ? "zoh" : "euler");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "euler") {
                     c.model.discretization = Discretization::euler;
                   } else if (v == "zoh") {
                     c.model.discretization = Discretization::zoh;
                   } else {
                     throw std::invalid_argument("model.discretization: expected euler or zoh, got '" + v + "'");
                   }
                 }});
    e.push_back(flag("model.layer_residual", &RunConfig::model, &M::layer_residual));
    e.push_back(real("model.stitch_diag", &RunConfig::model, &M::stitch_diag));
    e.push_back(real("model.stitch_off", &RunConfig::model, &M::stitch_off));

    e.push_back(real("features.sample_rate", &RunConfig::features, &F::sample_rate));
    e.push_back(integer("features.n_fft", &RunConfig::features, &F::n_fft));
    e.push_back(integer("features.hop", &RunConfig::features, &F::hop));
    e.push_back(integer("features.n_mels", &RunConfig::features, &F::n_mels));
    e.push_back(real("features.fmin", &RunConfig::features, &F::fmin));
    e.push_back(real("features.fmax", &RunConfig::features, &F::fmax));
    e.push_back(flag("features.sde_use_ivs", &RunConfig::features, &F::sde_use_ivs));

    e.push_back(real("optim.lr", &RunConfig::optim, &O::lr));
    e.push_back(real("optim.beta1", &RunConfig::optim, &O::beta1));
    e.push_back(real("optim.beta2", &RunConfig::optim, &O::beta2));
    e.push_back(real("optim.eps", &RunConfig::optim, &O::eps));
    e.push_back(real("optim.weight_decay", &RunConfig::optim, &O::weight_decay));

    e.push_back({"train.stage_plan", [](const RunConfig& c) { return stage_plan_name(c.train.stage_plan); },
                 [](RunConfig& c, const std::string& v) { c.train.stage_plan = parse_stage_plan(v); }});
    e.push_back(integer("train.epochs", &RunConfig::train, &T::epochs));
    e.push_back(integer("train.stage1_epochs", &RunConfig::train, &T::stage1_epochs));
    e.push_back(integer("train.stage2_epochs", &RunConfig::train, &T::stage2_epochs));
    e.push_back(integer("train.halve_after", &RunConfig::train, &T::halve_after));
    e.push_back(real("train.stage2_lr_scale", &RunConfig::train, &T::stage2_lr_scale));
    e.push_back(integer("train.batch_size", &RunConfig::train, &T::batch_size));
    e.push_back(integer("train.seed", &RunConfig::train, &T::seed));
    e.push_back(integer("train.eval_every", &RunConfig::train, &T::eval_every));
    e.push_back(real("train.threshold", &RunConfig::train, &T::threshold));
    e.push_back(text("train.output_dir", &RunConfig::train, &T::output_dir));

    e.push_back(text("data.train_manifest", &RunConfig::data, &D::train_manifest));
    e.push_back(text("data.eval_manifest", &RunConfig::data, &D::eval_manifest));
    e.push_back(text("data.feature_cache", &RunConfig::data, &D::feature_cache));
    e.push_back(integer("data.synth_count", &RunConfig::data, &D::synth_count));
    e.push_back(real("data.segment_seconds", &RunConfig::data, &D::segment_seconds));
    e.push_back({"data.synth.seed", [](const RunConfig& c) { return std::to_string(c.data.synth.seed); },
                 [](RunConfig& c, const std::string& v) { c.data.synth.seed = to_uint("data.synth.seed", v); }});
    e.push_back(synth_uint("data.synth.n_events", &SceneSpec::n_events));
    e.push_back(synth_uint("data.synth.max_overlap", &SceneSpec::max_overlap));
    e.push_back(synth_real("data.synth.azimuth_min", &SceneSpec::azimuth_min));
    e.push_back(synth_real("data.synth.azimuth_max", &SceneSpec::azimuth_max));
    e.push_back(synth_real("data.synth.elevation_min", &SceneSpec::elevation_min));
    e.push_back(synth_real("data.synth.elevation_max", &SceneSpec::elevation_max));
    e.push_back(synth_real("data.synth.distance_min", &SceneSpec::distance_min));
    e.push_back(synth_real("data.synth.distance_max", &SceneSpec::distance_max));
    e.push_back(synth_real("data.synth.snr_min_db", &SceneSpec::snr_min_db));
    e.push_back(synth_real("data.synth.snr_max_db", &SceneSpec::snr_max_db));
    e.push_back(synth_real("data.synth.event_min", &SceneSpec::event_min));
    e.push_back(synth_real("data.synth.event_max", &SceneSpec::event_max));
    return e;
  }();
  return table;
}

const Entry& entry(const std::string& key) {
  for (const Entry& e : entries()) {
    if (e.key == key) return e;
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::string env_name(const std::string& key) {
  std::string s = "SELD_";
  for (char c : key) s += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

StagePlan parse_stage_plan(const std::string& s) {
  if (s == "unified") return StagePlan::unified;
  if (s == "two-stage") return StagePlan::two_stage;
  throw std::invalid_argument("stage plan must be unified or two-stage, got '" + s + "'");
}

std::string stage_plan_name(StagePlan p) { return p == StagePlan::unified ? "unified" : "two-stage"; }

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Entry& e : entries()) keys.push_back(e.key);
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  entry(key).set(cfg, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return entry(key).get(cfg); }

void RunConfig::finalize() {
  model.n_mels = features.n_mels;
  model.sde_use_ivs = features.sde_use_ivs;
  data.synth.n_classes = model.n_classes;
  data.synth.sample_rate = features.sample_rate;
  data.synth.duration = data.segment_seconds;
  model.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (train.batch_size == 0) fail("train.batch_size must be positive");
  if (train.epochs == 0 || train.stage1_epochs == 0 || train.stage2_epochs == 0) fail("epoch counts must be positive");
  if (!(optim.lr > 0.0)) fail("optim.lr must be positive");
  if (!(train.stage2_lr_scale > 0.0)) fail("train.stage2_lr_scale must be positive");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    fail("optim betas must lie in [0, 1)");
  }
  if (!(optim.weight_decay >= 0.0)) fail("optim.weight_decay must be nonnegative");
  if (!(train.threshold > 0.0 && train.threshold < 1.0)) fail("train.threshold must lie in (0, 1)");
  const double frames = data.segment_seconds * features.sample_rate / static_cast<double>(features.hop);
  const double label_frames = data.segment_seconds / kLabelFrame;
  if (std::abs(frames - std::round(frames)) > 1e-9 || std::llround(frames) % 8 != 0 ||
      std::abs(label_frames - std::round(label_frames)) > 1e-9 ||
      std::llround(frames) / 8 != std::llround(label_frames)) {
    fail("segment of " + fmt(data.segment_seconds) + " s must give a multiple of 8 feature frames, eight per " +
         "0.1 s label frame");
  }
}

std::string RunConfig::snapshot() const {
  std::string s;
  for (const Entry& e : entries()) s += e.key + " = " + e.get(*this) + "\n";
  return s;
}

std::map<std::string, std::string> RunConfig::architecture() const {
  std::map<std::string, std::string> out;
  for (const Entry& e : entries()) {
    if (e.key.rfind("model.", 0) == 0 || e.key == "features.n_mels" || e.key == "features.sde_use_ivs") {
      out[e.key] = e.get(*this);
    }
  }
  return out;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(source + ":" + std::to_string(n) + ": expected key = value");
    }
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(source + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

void apply_env_overrides(RunConfig& cfg, const std::function<const char*(const char*)>& lookup) {
  auto get = lookup ? lookup : [](const char* name) -> const char* { return std::getenv(name); };
  for (const Entry& e : entries()) {
    const std::string name = env_name(e.key);
    if (const char* v = get(name.c_str())) {
      try {
        e.set(cfg, trim(v));
      } catch (const std::invalid_argument& err) {
        throw std::invalid_argument(name + ": " + err.what());
      }
    }
  }
}

RunConfig preset(const std::string& name) {
  RunConfig cfg;
  if (name == "paper") return cfg;
  if (name != "desk") throw std::invalid_argument("unknown preset '" + name + "' (expected paper or desk)");
  cfg.model.n_classes = 4;
  cfg.model.conv_channels = {4, 8, 16, 16};
  cfg.model.d_model = 16;
  cfg.model.d_state = 4;
  cfg.features.n_mels = 16;
  cfg.optim.lr = 1e-3;
  cfg.train.epochs = 30;
  cfg.train.stage1_epochs = 30;
  cfg.train.stage2_epochs = 15;
  cfg.train.halve_after = 24;
  cfg.train.stage2_lr_scale = 0.25;
  cfg.train.eval_every = 5;
  cfg.train.output_dir = "runs/desk";
  cfg.data.synth_count = 200;
  cfg.data.synth.n_events = 2;
  cfg.data.synth.max_overlap = 1;
  return cfg;
}

}  // namespace seld
