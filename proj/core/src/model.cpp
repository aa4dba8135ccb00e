#include "seld/model.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace seld {

namespace {

constexpr const char* kBranchNames[3] = {"sed", "doa", "sde"};

Tensor uniform(std::mt19937_64& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

ConvUnit make_conv_unit(ParameterStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                        std::size_t index, std::mt19937_64& rng) {
  const std::string idx = std::to_string(index);
  ConvUnit u;
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * 9));
  u.weight = &store.add(prefix + ".conv" + idx + ".weight", uniform(rng, {c_out, c_in, 3, 3}, bound));
  u.gamma = &store.add(prefix + ".bn" + idx + ".weight", Tensor({c_out}, 1.0));
  u.beta = &store.add(prefix + ".bn" + idx + ".bias", Tensor({c_out}, 0.0));
  u.running_mean = &store.add(prefix + ".bn" + idx + ".running_mean", Tensor({c_out}, 0.0), false);
  u.running_var = &store.add(prefix + ".bn" + idx + ".running_var", Tensor({c_out}, 1.0), false);
  return u;
}

Var conv_unit(Binder& bind, Var x, const ConvUnit& u, BatchNormMode mode) {
  Var y = conv2d(x, bind(*u.weight), std::nullopt);
  y = batch_norm(y, bind(*u.gamma), bind(*u.beta), mode, {u.running_mean, u.running_var});
  return relu(y);
}

Var stack_tracks(const std::vector<Var>& tracks) {
  std::vector<Var> parts;
  for (Var t : tracks) parts.push_back(reshape(t, {t.dim(0), 1, t.dim(1), t.dim(2)}));
  return concat(parts, 1);
}

}  // namespace

const char* branch_name(std::size_t branch) {
  if (branch >= kNumBranches) throw std::out_of_range("branch index " + std::to_string(branch));
  return kBranchNames[branch];
}

std::size_t ModelConfig::input_channels(std::size_t branch) const {
  if (branch == 1) return 7;
  if (branch == 2) return sde_use_ivs ? 7 : 4;
  return 4;
}

MambaConfig ModelConfig::mamba() const {
  MambaConfig m;
  m.d_model = d_model;
  m.expand = expand;
  m.d_state = d_state;
  m.conv_kernel = conv_kernel;
  m.dt_rank = dt_rank;
  m.discretization = discretization;
  m.residual = layer_residual;
  return m;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (n_classes == 0) fail("n_classes must be positive");
  if (n_tracks != kNumTracks) fail("n_tracks must be 3");
  for (std::size_t c : conv_channels) {
    if (c == 0) fail("conv channels must be positive");
  }
  if (d_model != conv_channels[3]) {
    fail("d_model (" + std::to_string(d_model) + ") must equal the last conv width (" +
         std::to_string(conv_channels[3]) + ")");
  }
  if (bmamba_per_branch != kNumTracks) fail("bmamba_per_branch must be 3 (one block per track)");
  if (d_state == 0 || expand == 0 || conv_kernel == 0) fail("Mamba dimensions must be positive");
  if (n_mels < 16 || n_mels % 16 != 0) fail("n_mels must be a positive multiple of 16");
}

Var dual_conv_stage(Binder& bind, Var x, const DualConvParams& p, Pool pool, BatchNormMode mode) {
  Var y = conv_unit(bind, x, p.first, mode);
  y = conv_unit(bind, y, p.second, mode);
  return pool == Pool::tf ? avg_pool2d(y, 2, 2) : avg_pool2d(y, 1, 2);
}

std::array<Var, 3> cross_stitch(const std::array<Var, 3>& x, Var alpha) {
  if (alpha.shape() != Shape{3, 3}) throw std::invalid_argument("cross_stitch: alpha must be (3, 3)");
  for (const Var& v : x) {
    if (v.shape() != x[0].shape()) throw std::invalid_argument("cross_stitch: branch shapes differ");
  }
  Var flat = reshape(alpha, {9});
  std::array<Var, 3> out;
  for (std::size_t i = 0; i < 3; ++i) {
    Var acc = mul(slice(flat, 0, i * 3, 1), x[0]);
    for (std::size_t j = 1; j < 3; ++j) acc = add(acc, mul(slice(flat, 0, i * 3 + j, 1), x[j]));
    out[i] = acc;
  }
  return out;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  for (std::size_t b = 0; b < kNumBranches; ++b) {
    std::size_t c_in = cfg_.input_channels(b);
    for (std::size_t s = 0; s < 4; ++s) {
      const std::string prefix = std::string("encoder.") + kBranchNames[b] + ".stage" + std::to_string(s + 1);
      const std::size_t c_out = cfg_.conv_channels[s];
      stages_[b][s].first = make_conv_unit(store_, prefix, c_in, c_out, 1, rng);
      stages_[b][s].second = make_conv_unit(store_, prefix, c_out, c_out, 2, rng);
      c_in = c_out;
    }
  }
  for (std::size_t s = 0; s < 4; ++s) {
    Tensor alpha({3, 3}, cfg_.stitch_off);
    for (std::size_t i = 0; i < 3; ++i) alpha[i * 3 + i] = cfg_.stitch_diag;
    stitch_[s] = &store_.add("encoder.stitch" + std::to_string(s + 1), std::move(alpha));
  }
  const MambaConfig mcfg = cfg_.mamba();
  for (std::size_t b = 0; b < kNumBranches; ++b) {
    for (std::size_t k = 0; k < kNumTracks; ++k) {
      decoders_[b][k] = make_bmamba(store_, std::string("decoder.") + kBranchNames[b] + ".track" + std::to_string(k),
                                    mcfg, rng);
    }
  }
  const std::size_t out_dims[3] = {cfg_.n_classes, 3, 1};
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  for (std::size_t b = 0; b < kNumBranches; ++b) {
    for (std::size_t k = 0; k < kNumTracks; ++k) {
      const std::string prefix = std::string("head.") + kBranchNames[b] + ".track" + std::to_string(k);
      heads_[b][k].weight = &store_.add(prefix + ".weight", uniform(rng, {out_dims[b], cfg_.d_model}, bound));
      heads_[b][k].bias = &store_.add(prefix + ".bias", Tensor({out_dims[b]}, b == 2 ? 1.0 : 0.0));
    }
  }
  for (std::size_t b = 0; b < kNumBranches; ++b) {
    const Shape s{cfg_.input_channels(b), cfg_.n_mels};
    const std::string prefix = std::string("input.") + kBranchNames[b];
    input_mean_[b] = &store_.add(prefix + ".mean", Tensor(s, 0.0), false);
    input_std_[b] = &store_.add(prefix + ".std", Tensor(s, 1.0), false);
  }
}

std::array<Var, 3> Model::encoder_forward(Binder& bind, const std::array<Var, 3>& inputs, BatchNormMode mode) const {
  std::array<Var, 3> x = inputs;
  for (std::size_t b = 0; b < kNumBranches; ++b) {
    const Shape& s = x[b].shape();
    if (s.size() != 4 || s[1] != cfg_.input_channels(b) || s[3] != cfg_.n_mels || s[2] % 8 != 0) {
      throw std::invalid_argument(std::string("encoder: ") + kBranchNames[b] + " input " + shape_str(s) +
                                  " must be (B, " + std::to_string(cfg_.input_channels(b)) + ", 8k, " +
                                  std::to_string(cfg_.n_mels) + ")");
    }
    if (s[0] != x[0].dim(0) || s[2] != x[0].dim(2)) throw std::invalid_argument("encoder: branch inputs disagree");
  }
  for (std::size_t s = 0; s < 4; ++s) {
    const Pool pool = s < 3 ? Pool::tf : Pool::f;
    for (std::size_t b = 0; b < kNumBranches; ++b) x[b] = dual_conv_stage(bind, x[b], stages_[b][s], pool, mode);
    x = cross_stitch(x, bind(*stitch_[s]));
  }
  for (auto& v : x) v = transpose(mean_axis(v, 3), {0, 2, 1});
  return x;
}

TrackOutput Model::decoder_forward(Binder& bind, const std::array<Var, 3>& embeddings) const {
  std::array<std::vector<Var>, 3> tracks;
  for (std::size_t b = 0; b < kNumBranches; ++b) {
    for (std::size_t k = 0; k < kNumTracks; ++k) {
      Var h = bmamba_block(bind, embeddings[b], decoders_[b][k]);
      Var y = linear(h, bind(*heads_[b][k].weight), bind(*heads_[b][k].bias));
      tracks[b].push_back(b == 0 ? sigmoid(y) : b == 1 ? tanh(y) : relu(y));
    }
  }
  return {stack_tracks(tracks[0]), stack_tracks(tracks[1]), stack_tracks(tracks[2])};
}

TrackOutput Model::forward(Binder& bind, const std::array<Var, 3>& inputs, BatchNormMode mode) const {
  return decoder_forward(bind, encoder_forward(bind, inputs, mode));
}

void Model::set_input_stats(std::size_t branch, const Tensor& mean, const Tensor& std) {
  const Shape expect{cfg_.input_channels(branch), cfg_.n_mels};
  if (mean.shape() != expect || std.shape() != expect) {
    throw std::invalid_argument("input stats for " + std::string(branch_name(branch)) + " must be " +
                                shape_str(expect));
  }
  for (double v : std.data()) {
    if (!(v > 0.0)) throw std::invalid_argument("input stats: standard deviations must be positive");
  }
  input_mean_[branch]->value = mean;
  input_std_[branch]->value = std;
}

Tensor Model::normalize_input(std::size_t branch, const Tensor& x) const {
  const Tensor& mu = input_mean_.at(branch)->value;
  const Tensor& sd = input_std_[branch]->value;
  const std::size_t c = mu.dim(0), f = mu.dim(1);
  if (x.rank() != 4 || x.dim(1) != c || x.dim(3) != f) {
    throw std::invalid_argument("normalize_input: expected (B, " + std::to_string(c) + ", T, " + std::to_string(f) +
                                "), got " + shape_str(x.shape()));
  }
  Tensor out = x;
  const std::size_t frames = x.dim(2);
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* row = out.ptr() + (b * c + ch) * frames * f;
      for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t m = 0; m < f; ++m) row[t * f + m] = (row[t * f + m] - mu[ch * f + m]) / sd[ch * f + m];
      }
    }
  }
  return out;
}

std::array<Tensor, 3> stack_features(const std::vector<const BranchFeatures*>& items) {
  if (items.empty()) throw std::invalid_argument("stack_features: empty batch");
  std::array<Tensor, 3> out;
  for (std::size_t b = 0; b < 3; ++b) {
    auto pick = [b](const BranchFeatures& f) -> const Tensor& { return b == 0 ? f.sed : b == 1 ? f.doa : f.sde; };
    const Shape& s = pick(*items[0]).shape();
    Shape batched{items.size()};
    batched.insert(batched.end(), s.begin(), s.end());
    out[b] = Tensor(batched);
    const std::size_t n = shape_numel(s);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const Tensor& t = pick(*items[i]);
      if (t.shape() != s) throw std::invalid_argument("stack_features: item shapes differ");
      std::copy(t.ptr(), t.ptr() + n, out[b].ptr() + i * n);
    }
  }
  return out;
}

Complexity count_params_macs(const ModelConfig& cfg, const FeatureConfig& features, double seconds) {
  cfg.validate();
  Complexity c;
  const std::size_t frames = static_cast<std::size_t>(std::floor(seconds * features.sample_rate / features.hop));
  const std::size_t d = cfg.d_model, e = cfg.expand * d, n = cfg.d_state, k = cfg.conv_kernel;
  const std::size_t r = cfg.dt_rank ? cfg.dt_rank : (d + 15) / 16;

  for (std::size_t b = 0; b < kNumBranches; ++b) {
    std::size_t c_in = cfg.input_channels(b), h = frames, w = cfg.n_mels;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t c_out = cfg.conv_channels[s];
      c.params += 9 * c_in * c_out + 9 * c_out * c_out + 4 * c_out;
      c.macs += 9 * (c_in * c_out + c_out * c_out) * h * w;
      if (s < 3) h /= 2;
      w /= 2;
      c_in = c_out;
    }
  }
  {
    std::size_t h = frames, w = cfg.n_mels;
    for (std::size_t s = 0; s < 4; ++s) {
      if (s < 3) h /= 2;
      w /= 2;
      c.params += 9;
      c.macs += 9 * cfg.conv_channels[s] * h * w;
    }
  }
  const std::size_t steps = frames / 8;
  const std::size_t layer_params = 2 * (e * d + e) + (e * k + e) + e * n + r * e + (e * r + e) + 2 * n * e + d * e + d;
  const std::size_t layer_macs = 2 * e * d + e * k + 2 * e * r + 2 * n * e + 2 * e * n + d * e;
  const std::size_t blocks = kNumBranches * kNumTracks;
  c.params += blocks * (4 * layer_params + 2 * d);
  c.macs += blocks * 4 * layer_macs * steps;
  const std::size_t head_out = cfg.n_classes + 3 + 1;
  c.params += kNumTracks * head_out * (d + 1);
  c.macs += kNumTracks * head_out * d * steps;
  return c;
}

std::string describe_parameters(const ParameterStore& store) {
  std::ostringstream os;
  for (const Parameter& p : store.all()) {
    os << p.name << " " << shape_str(p.value.shape()) << " " << p.value.size() << (p.trainable ? "" : " buffer")
       << "\n";
  }
  os << "trainable " << store.trainable_count() << "\n";
  return os.str();
}

}  // namespace seld
