#include "seld/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "seld/data.hpp"

namespace seld {

namespace {

namespace fs = std::filesystem;

std::size_t label_frames(const RunConfig& cfg) {
  return static_cast<std::size_t>(std::llround(cfg.data.segment_seconds / kLabelFrame));
}

std::array<Tensor, 3> normalized_batch(const Model& model, const Dataset& data, std::size_t begin, std::size_t end,
                                       const std::vector<std::size_t>* order = nullptr) {
  std::vector<const BranchFeatures*> items;
  for (std::size_t i = begin; i < end; ++i) items.push_back(&data.items[order ? (*order)[i] : i].features);
  std::array<Tensor, 3> x = stack_features(items);
  for (std::size_t b = 0; b < 3; ++b) x[b] = model.normalize_input(b, x[b]);
  return x;
}

void append(EventList& all, const EventList& part) { all.insert(all.end(), part.begin(), part.end()); }

std::string fmt_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void put_report(Container& c, const std::string& prefix, const MetricReport& r) {
  c.set_meta(prefix + ".f20", fmt_fixed(r.f20, 17));
  c.set_meta(prefix + ".doae", fmt_fixed(r.doae, 17));
  c.set_meta(prefix + ".rde", fmt_fixed(r.rde, 17));
  c.set_meta(prefix + ".counts", std::to_string(r.tp) + " " + std::to_string(r.fp) + " " + std::to_string(r.fn) +
                                     " " + std::to_string(r.matched));
}

MetricReport get_report(const Container& c, const std::string& prefix) {
  MetricReport r;
  r.f20 = std::stod(c.meta(prefix + ".f20"));
  r.doae = std::stod(c.meta(prefix + ".doae"));
  r.rde = std::stod(c.meta(prefix + ".rde"));
  std::istringstream counts(c.meta(prefix + ".counts"));
  counts >> r.tp >> r.fp >> r.fn >> r.matched;
  r.no_matches = r.matched == 0;
  r.seld_score = seld_score(r.f20, r.doae, r.rde);
  return r;
}

}  // namespace

Dataset synthetic_dataset(const RunConfig& cfg) {
  Dataset d;
  const std::size_t frames = label_frames(cfg);
  for (std::size_t i = 0; i < cfg.data.synth_count; ++i) {
    SceneSpec spec = cfg.data.synth;
    spec.seed = cfg.data.synth.seed + i;
    const Scene scene = synth_scene(spec);
    Example ex;
    ex.name = "synth_" + std::to_string(spec.seed);
    ex.features = assemble_branch_inputs(scene.clip, cfg.features);
    ex.targets = encode_targets(scene.labels, frames, cfg.model.n_classes);
    ex.refs = decode_targets(ex.targets, 0);
    d.items.push_back(std::move(ex));
  }
  return d;
}

Dataset manifest_dataset(const fs::path& manifest, const RunConfig& cfg) {
  Dataset d;
  const std::size_t frames = label_frames(cfg);
  const auto window = static_cast<std::size_t>(std::llround(cfg.data.segment_seconds * cfg.features.sample_rate));
  for (const ManifestEntry& entry : read_manifest(manifest)) {
    if (!fs::exists(entry.labels)) throw std::runtime_error("missing labels " + entry.labels.string());
    const FoaClip clip = read_wav(entry.clip);
    if (std::abs(clip.sample_rate - cfg.features.sample_rate) > 1e-9) {
      throw std::runtime_error(entry.clip.string() + ": sample rate " + fmt_fixed(clip.sample_rate, 0) +
                               " differs from features.sample_rate");
    }
    const std::size_t length = clip.samples.dim(1);
    const std::size_t windows = std::max<std::size_t>(1, (length + window - 1) / window);
    const EventList labels = read_labels(entry.labels, windows * frames);
    if (labels.size() > windows * frames) {
      throw std::runtime_error(entry.labels.string() + ": labels extend past the end of " + entry.clip.string());
    }
    for (std::size_t w = 0; w < windows; ++w) {
      Example ex;
      ex.name = entry.clip.stem().string() + "#" + std::to_string(w);
      fs::path cache;
      if (!cfg.data.feature_cache.empty()) {
        cache = fs::path(cfg.data.feature_cache) / (entry.clip.stem().string() + "." + std::to_string(w) + ".feat");
      }
      if (!cache.empty() && fs::exists(cache)) {
        ex.features = load_feature_cache(cache, cfg.features);
      } else {
        FoaClip part{Tensor({4, window}), clip.sample_rate};
        for (std::size_t ch = 0; ch < 4; ++ch) {
          const std::size_t start = w * window, stop = std::min(length, start + window);
          const double* src = clip.samples.ptr() + ch * length;
          std::copy(src + start, src + stop, part.samples.ptr() + ch * window);
        }
        ex.features = assemble_branch_inputs(part, cfg.features);
        if (!cache.empty()) {
          fs::create_directories(cache.parent_path());
          save_feature_cache(cache, ex.features, cfg.features);
        }
      }
      ex.refs.assign(labels.begin() + static_cast<std::ptrdiff_t>(w * frames),
                     labels.begin() + static_cast<std::ptrdiff_t>((w + 1) * frames));
      ex.targets = targets_from_events(ex.refs, cfg.model.n_classes);
      d.items.push_back(std::move(ex));
    }
  }
  if (d.items.empty()) throw std::runtime_error("manifest " + manifest.string() + " lists no clips");
  return d;
}

InputStats compute_input_stats(const Dataset& data) {
  if (data.items.empty()) throw std::invalid_argument("compute_input_stats: empty dataset");
  InputStats s;
  for (std::size_t b = 0; b < 3; ++b) {
    auto pick = [b](const Example& e) -> const Tensor& {
      return b == 0 ? e.features.sed : b == 1 ? e.features.doa : e.features.sde;
    };
    const Shape& shape = pick(data.items[0]).shape();
    const std::size_t c = shape[0], f = shape[2];
    std::vector<double> sum(c * f, 0.0), sq(c * f, 0.0);
    double count = 0.0;
    for (const Example& e : data.items) {
      const Tensor& x = pick(e);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < x.dim(1); ++i) {
          for (std::size_t m = 0; m < f; ++m) {
            const double v = x[(ch * x.dim(1) + i) * f + m];
            sum[ch * f + m] += v;
            sq[ch * f + m] += v * v;
          }
        }
      }
      count += static_cast<double>(x.dim(1));
    }
    s.mean[b] = Tensor({c, f});
    s.std[b] = Tensor({c, f});
    for (std::size_t i = 0; i < c * f; ++i) {
      const double mu = sum[i] / count;
      s.mean[b][i] = mu;
      s.std[b][i] = std::max(1e-6, std::sqrt(std::max(0.0, sq[i] / count - mu * mu)));
    }
  }
  return s;
}

void apply_input_stats(Model& model, const InputStats& stats) {
  for (std::size_t b = 0; b < 3; ++b) model.set_input_stats(b, stats.mean[b], stats.std[b]);
}

void AdamW::step(ParameterStore& store, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter& p : store.all()) {
    if (!p.trainable) continue;
    if (p.grad.size() != p.value.size()) throw std::logic_error("AdamW: parameter " + p.name + " has no gradient");
    auto [mi, fresh_m] = m_.try_emplace(p.name, p.value.shape());
    auto [vi, fresh_v] = v_.try_emplace(p.name, p.value.shape());
    (void)fresh_m;
    (void)fresh_v;
    double* m = mi->second.ptr();
    double* v = vi->second.ptr();
    double* w = p.value.ptr();
    const double* g = p.grad.ptr();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      w[i] -= lr * (update + cfg_.weight_decay * w[i]);
    }
  }
}

void AdamW::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

void AdamW::save(Container& c) const {
  c.set_meta("adam.step", std::to_string(t_));
  for (const auto& [name, t] : m_) c.put("adam.m." + name, t);
  for (const auto& [name, t] : v_) c.put("adam.v." + name, t);
}

void AdamW::load(const Container& c, const ParameterStore& store) {
  reset();
  if (!c.has_meta("adam.step")) throw std::runtime_error("checkpoint has no optimizer state");
  t_ = std::stoull(c.meta("adam.step"));
  if (t_ == 0) return;
  for (const Parameter& p : store.all()) {
    if (!p.trainable) continue;
    const Tensor& m = c.get("adam.m." + p.name);
    const Tensor& v = c.get("adam.v." + p.name);
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape()) {
      throw std::runtime_error("optimizer state for " + p.name + " has the wrong shape");
    }
    m_[p.name] = m;
    v_[p.name] = v;
  }
}

std::string EpochLog::to_line() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "stage=" << stage_name(stage) << " epoch=" << epoch << " lr=" << std::setprecision(6) << lr
     << std::setprecision(4) << " lambda=(" << weights.sed << "," << weights.doa << "," << weights.dist << ")"
     << " loss=" << loss << " sed=" << components.sed << " doa=" << components.doa << " dist=" << components.dist;
  if (metrics) {
    os << " F20=" << metrics->f20 << " DOAE=" << metrics->doae << " RDE=" << metrics->rde
       << " SELD=" << metrics->seld_score;
  }
  os << " time=" << std::setprecision(1) << seconds << "s";
  return os.str();
}

TrackTensors predict(const Model& model, const std::array<Tensor, 3>& inputs) {
  Graph g;
  Binder bind(g);
  const TrackOutput out =
      model.forward(bind, {g.constant(inputs[0]), g.constant(inputs[1]), g.constant(inputs[2])},
                    BatchNormMode::inference);
  g.forward_eval();
  return {g.value(out.sed), g.value(out.doa), g.value(out.dist)};
}

MetricReport evaluate(const Model& model, const Dataset& data, double threshold, std::size_t batch_size,
                      const MetricOptions& opts) {
  if (data.items.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch size must be positive");
  EventList preds, refs;
  for (std::size_t begin = 0; begin < data.items.size(); begin += batch_size) {
    const std::size_t end = std::min(data.items.size(), begin + batch_size);
    const TrackTensors out = predict(model, normalized_batch(model, data, begin, end));
    for (std::size_t i = begin; i < end; ++i) {
      const EventList p = decode_tracks(out, i - begin, threshold);
      if (p.size() != data.items[i].refs.size()) {
        throw std::runtime_error("evaluate: model emits " + std::to_string(p.size()) + " frames for " +
                                 data.items[i].name + ", labels have " + std::to_string(data.items[i].refs.size()));
      }
      append(preds, p);
      append(refs, data.items[i].refs);
    }
  }
  return evaluate_events(preds, refs, opts);
}

void save_checkpoint(const fs::path& path, const Model& model, const RunConfig& cfg, const AdamW* optimizer,
                     const std::map<std::string, std::string>& progress) {
  Container c;
  for (const std::string& key : config_keys()) c.set_meta("config." + key, get_config_value(cfg, key));
  for (const auto& [k, v] : progress) c.set_meta(k, v);
  for (const Parameter& p : model.params().all()) c.put(p.name, p.value);
  if (optimizer) optimizer->save(c);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  write_container(tmp, c);
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint " + path.string() + " does not exist");
  LoadedCheckpoint out;
  out.raw = read_container(path);
  for (const std::string& key : config_keys()) {
    const std::string meta = "config." + key;
    if (!out.raw.has_meta(meta)) throw std::runtime_error(path.string() + ": missing config entry " + key);
    set_config_value(out.config, key, out.raw.meta(meta));
  }
  out.config.finalize();
  out.model = std::make_unique<Model>(out.config.model, out.config.train.seed);
  for (Parameter& p : out.model->params().all()) {
    if (!out.raw.has(p.name)) throw std::runtime_error(path.string() + ": missing tensor " + p.name);
    const Tensor& t = out.raw.get(p.name);
    if (t.shape() != p.value.shape()) {
      throw std::runtime_error(path.string() + ": tensor " + p.name + " has shape " + shape_str(t.shape()) +
                               ", model expects " + shape_str(p.value.shape()));
    }
    p.value = t;
  }
  return out;
}

Trainer::Trainer(RunConfig cfg, Dataset train, std::optional<Dataset> eval)
    : cfg_(std::move(cfg)), train_(std::move(train)), eval_(std::move(eval)), optim_(cfg_.optim) {
  cfg_.finalize();
  if (train_.items.empty()) throw std::invalid_argument("trainer: empty training set");
  model_ = std::make_unique<Model>(cfg_.model, cfg_.train.seed);
  apply_input_stats(*model_, compute_input_stats(train_));
}

std::vector<Stage> Trainer::stages() const {
  if (cfg_.train.stage_plan == StagePlan::unified) return {Stage::unified};
  return {Stage::stage1, Stage::stage2};
}

std::size_t Trainer::stage_epochs(Stage s) const {
  switch (s) {
    case Stage::unified:
      return cfg_.train.epochs;
    case Stage::stage1:
      return cfg_.train.stage1_epochs;
    case Stage::stage2:
      return cfg_.train.stage2_epochs;
  }
  return 0;
}

void Trainer::resume(const fs::path& checkpoint) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const auto want = cfg_.architecture(), have = ck.config.architecture();
  for (const auto& [key, value] : want) {
    if (have.at(key) != value) {
      throw std::runtime_error("cannot resume from " + checkpoint.string() + ": " + key + " is " + have.at(key) +
                               " in the checkpoint but " + value + " in this run");
    }
  }
  if (ck.config.train.stage_plan != cfg_.train.stage_plan) {
    throw std::runtime_error("cannot resume from " + checkpoint.string() + ": stage plan differs");
  }
  for (Parameter& p : model_->params().all()) p.value = ck.model->params().get(p.name).value;
  optim_.load(ck.raw, model_->params());
  stage_index_ = std::stoull(ck.raw.meta("progress.stage_index"));
  epochs_done_ = std::stoull(ck.raw.meta("progress.epochs_done"));
  stage_reports_.clear();
  for (std::size_t i = 0; i < stage_index_; ++i) {
    stage_reports_.push_back({stages().at(i), get_report(ck.raw, "progress.stage" + std::to_string(i))});
  }
}

EpochLog Trainer::run_epoch(Stage stage, std::size_t epoch, std::size_t global_epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  EpochLog log;
  log.stage = stage;
  log.epoch = epoch;
  log.weights = stage_schedule(stage);
  const double base = cfg_.optim.lr * (stage == Stage::stage2 ? cfg_.train.stage2_lr_scale : 1.0);
  log.lr = base * (epoch > cfg_.train.halve_after ? 0.5 : 1.0);

  std::vector<std::size_t> order(train_.items.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg_.train.seed * 1000003ULL + global_epoch);
  std::shuffle(order.begin(), order.end(), rng);

  double weight_sum = 0.0;
  for (std::size_t begin = 0; begin < order.size(); begin += cfg_.train.batch_size) {
    const std::size_t end = std::min(order.size(), begin + cfg_.train.batch_size);
    const auto x = normalized_batch(*model_, train_, begin, end, &order);
    std::vector<FrameTargets> targets;
    for (std::size_t i = begin; i < end; ++i) targets.push_back(train_.items[order[i]].targets);
    const FrameTargets tgt = stack_targets(targets);

    Graph g;
    Binder bind(g);
    const TrackOutput out =
        model_->forward(bind, {g.constant(x[0]), g.constant(x[1]), g.constant(x[2])}, BatchNormMode::training);
    auto result = std::make_shared<PitResult>();
    Var loss = pit_loss(out.sed, out.doa, out.dist, tgt, log.weights, result);
    g.forward_eval();
    g.backward(loss);
    model_->params().zero_grad();
    g.accumulate_parameter_grads();
    optim_.step(model_->params(), log.lr);

    const double w = static_cast<double>(end - begin);
    weight_sum += w;
    log.loss += w * result->loss;
    log.components.sed += w * result->components.sed;
    log.components.doa += w * result->components.doa;
    log.components.dist += w * result->components.dist;
  }
  log.loss /= weight_sum;
  log.components.sed /= weight_sum;
  log.components.doa /= weight_sum;
  log.components.dist /= weight_sum;

  const bool stage_end = epoch == stage_epochs(stage);
  if (stage_end || (cfg_.train.eval_every > 0 && epoch % cfg_.train.eval_every == 0)) {
    log.metrics = evaluate(*model_, scored(), cfg_.train.threshold, cfg_.train.batch_size);
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

TrainReport Trainer::run(std::ostream* log, std::size_t max_epochs) {
  const fs::path out_dir = cfg_.train.output_dir;
  fs::create_directories(out_dir);
  {
    std::ofstream snap(out_dir / "config.snapshot");
    snap << cfg_.snapshot();
  }
  std::ofstream log_file(out_dir / "train.log", std::ios::app);
  auto emit = [&](const std::string& line) {
    log_file << line << "\n";
    log_file.flush();
    if (log) *log << line << std::endl;
  };

  TrainReport report;
  const std::vector<Stage> plan = stages();
  std::size_t budget = max_epochs;
  std::size_t global_epoch = 0;
  for (std::size_t i = 0; i < stage_index_; ++i) global_epoch += stage_epochs(plan[i]);
  global_epoch += epochs_done_;

  auto progress = [&]() {
    std::map<std::string, std::string> p{{"progress.stage_index", std::to_string(stage_index_)},
                                         {"progress.epochs_done", std::to_string(epochs_done_)}};
    return p;
  };

  while (stage_index_ < plan.size()) {
    const Stage stage = plan[stage_index_];
    const std::size_t total = stage_epochs(stage);
    if (epochs_done_ == 0 && stage_index_ > 0) {
      optim_.reset();
      emit("stage=" + stage_name(stage) + " starts from the " + stage_name(plan[stage_index_ - 1]) +
           " weights with a fresh optimizer");
    }
    while (epochs_done_ < total) {
      if (budget == 0) {
        report.stages = stage_reports_;
        return report;
      }
      --budget;
      EpochLog e = run_epoch(stage, epochs_done_ + 1, global_epoch);
      ++epochs_done_;
      ++global_epoch;
      emit(e.to_line());
      if (epochs_done_ == total) {
        stage_reports_.push_back({stage, *e.metrics});
        ++stage_index_;
        epochs_done_ = 0;
      }
      auto p = progress();
      for (std::size_t i = 0; i < stage_reports_.size(); ++i) {
        Container tmp;
        put_report(tmp, "progress.stage" + std::to_string(i), stage_reports_[i].metrics);
        for (const auto& [k, v] : tmp.all_meta()) p[k] = v;
      }
      save_checkpoint(out_dir / "last.ckpt", *model_, cfg_, &optim_, p);
      if (stage_index_ < plan.size() && epochs_done_ == 0 && stage == Stage::stage1) {
        save_checkpoint(out_dir / "stage1.ckpt", *model_, cfg_, nullptr, p);
      }
      report.epochs.push_back(std::move(e));
      if (stage_index_ >= plan.size() || epochs_done_ == 0) break;
    }
  }

  report.stages = stage_reports_;
  report.final_metrics = report.stages.empty() ? evaluate(*model_, scored(), cfg_.train.threshold)
                                               : report.stages.back().metrics;
  report.finished = true;
  save_checkpoint(out_dir / "final.ckpt", *model_, cfg_);
  std::ofstream(out_dir / "report.txt") << report.final_metrics.to_text();
  std::ofstream(out_dir / "report.json") << report.final_metrics.to_json() << "\n";
  for (const StageReport& s : report.stages) {
    emit("stage=" + stage_name(s.stage) + " done F20=" + fmt_fixed(s.metrics.f20, 4) +
         " DOAE=" + fmt_fixed(s.metrics.doae, 4) + " RDE=" + fmt_fixed(s.metrics.rde, 4) +
         " SELD=" + fmt_fixed(s.metrics.seld_score, 4));
  }
  return report;
}

}  // namespace seld
