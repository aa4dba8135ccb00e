#include "seld/ssm.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "seld/ops.hpp"

namespace seld {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

struct ScanDims {
  std::size_t batch, len, chans, state;
};

ScanDims check_scan_shapes(const Shape& x, const Shape& delta, const Shape& a, const Shape& b, const Shape& c) {
  require(x.size() == 3, "selective_scan: x must be (B, L, E), got " + shape_str(x));
  require(delta == x, "selective_scan: delta " + shape_str(delta) + " vs x " + shape_str(x));
  require(a.size() == 2 && a[0] == x[2], "selective_scan: A must be (E, N), got " + shape_str(a));
  const Shape bn{x[0], x[1], a[1]};
  require(b == bn, "selective_scan: B " + shape_str(b) + " vs expected " + shape_str(bn));
  require(c == bn, "selective_scan: C " + shape_str(c) + " vs expected " + shape_str(bn));
  return {x[0], x[1], x[2], a[1]};
}

Tensor uniform(std::mt19937_64& rng, Shape shape, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

Discretized discretize(const Tensor& delta, const Tensor& a, const Tensor& b, Discretization mode) {
  require(delta.rank() == 2, "discretize: delta must be (L, E), got " + shape_str(delta.shape()));
  require(a.rank() == 2 && a.dim(0) == delta.dim(1), "discretize: A must be (E, N), got " + shape_str(a.shape()));
  require(b.rank() == 2 && b.dim(0) == delta.dim(0) && b.dim(1) == a.dim(1),
          "discretize: B must be (L, N), got " + shape_str(b.shape()));
  const std::size_t len = delta.dim(0), chans = delta.dim(1), state = a.dim(1);
  for (double d : delta.data()) require(d >= 0.0, "discretize: delta must be non-negative");
  for (double v : a.data()) require(v < 0.0, "discretize: A must be negative");
  Discretized r{Tensor({len, chans, state}), Tensor({len, chans, state})};
  for (std::size_t k = 0; k < len; ++k) {
    for (std::size_t e = 0; e < chans; ++e) {
      const double d = delta[k * chans + e];
      for (std::size_t n = 0; n < state; ++n) {
        const double av = a[e * state + n];
        const double ab = std::exp(d * av);
        const std::size_t i = (k * chans + e) * state + n;
        r.a_bar[i] = ab;
        r.b_bar[i] = mode == Discretization::euler ? d * b[k * state + n] : (ab - 1.0) / av * b[k * state + n];
      }
    }
  }
  return r;
}

Tensor scan_forward(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                    Discretization mode, Tensor* states) {
  const auto d = check_scan_shapes(x.shape(), delta.shape(), a.shape(), b.shape(), c.shape());
  require(d.len >= 1, "selective_scan: empty sequence");
  Tensor y({d.batch, d.len, d.chans});
  if (states && states->shape() != Shape{d.batch, d.len, d.chans, d.state}) {
    *states = Tensor({d.batch, d.len, d.chans, d.state});
  }
  std::vector<double> h(d.state);
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    for (std::size_t e = 0; e < d.chans; ++e) {
      std::fill(h.begin(), h.end(), 0.0);
      const double* arow = a.ptr() + e * d.state;
      for (std::size_t k = 0; k < d.len; ++k) {
        const std::size_t tk = bi * d.len + k;
        const double dt = delta[tk * d.chans + e];
        if (!(dt >= 0.0)) throw std::invalid_argument("selective_scan: delta must be non-negative");
        const double xv = x[tk * d.chans + e];
        const double* brow = b.ptr() + tk * d.state;
        const double* crow = c.ptr() + tk * d.state;
        double acc = 0.0;
        for (std::size_t n = 0; n < d.state; ++n) {
          const double ab = std::exp(dt * arow[n]);
          const double bb = mode == Discretization::euler ? dt * brow[n] : (ab - 1.0) / arow[n] * brow[n];
          h[n] = ab * h[n] + bb * xv;
          acc += crow[n] * h[n];
        }
        y[tk * d.chans + e] = acc;
        if (states) std::copy(h.begin(), h.end(), states->ptr() + (tk * d.chans + e) * d.state);
      }
    }
  }
  return y;
}

Var selective_scan(Var x, Var delta, Var a, Var b, Var c, Discretization mode) {
  const auto d = check_scan_shapes(x.shape(), delta.shape(), a.shape(), b.shape(), c.shape());
  auto states = std::make_shared<Tensor>();
  return x.graph->apply(
      "selective_scan", {x, delta, a, b, c}, x.shape(),
      [mode, states](TensorRefs in, Tensor& out) {
        out = scan_forward(*in[0], *in[1], *in[2], *in[3], *in[4], mode, states.get());
      },
      [mode, states, d](TensorRefs in, const Tensor&, const Tensor& gy, GradRefs gin) {
        const Tensor& x = *in[0];
        const Tensor& delta = *in[1];
        const Tensor& a = *in[2];
        const Tensor& b = *in[3];
        const Tensor& c = *in[4];
        const Tensor& hs = *states;
        std::vector<double> gh(d.state);
        for (std::size_t bi = 0; bi < d.batch; ++bi) {
          for (std::size_t e = 0; e < d.chans; ++e) {
            std::fill(gh.begin(), gh.end(), 0.0);
            const double* arow = a.ptr() + e * d.state;
            for (std::size_t k = d.len; k-- > 0;) {
              const std::size_t tk = bi * d.len + k;
              const std::size_t xe = tk * d.chans + e;
              const double dt = delta[xe];
              const double xv = x[xe];
              const double g_y = gy[xe];
              const double* h = hs.ptr() + xe * d.state;
              const double* hprev = k > 0 ? hs.ptr() + ((tk - 1) * d.chans + e) * d.state : nullptr;
              const double* brow = b.ptr() + tk * d.state;
              const double* crow = c.ptr() + tk * d.state;
              double g_x = 0.0, g_dt = 0.0;
              for (std::size_t n = 0; n < d.state; ++n) {
                if (gin[4]) (*gin[4])[tk * d.state + n] += g_y * h[n];
                gh[n] += g_y * crow[n];
                const double av = arow[n];
                const double ab = std::exp(dt * av);
                const double hp = hprev ? hprev[n] : 0.0;
                const double g_ab = gh[n] * hp;
                const double g_bb = gh[n] * xv;
                double bb;
                if (mode == Discretization::euler) {
                  bb = dt * brow[n];
                  g_dt += g_bb * brow[n];
                  if (gin[3]) (*gin[3])[tk * d.state + n] += g_bb * dt;
                  if (gin[2]) (*gin[2])[e * d.state + n] += g_ab * ab * dt;
                } else {
                  const double coef = (ab - 1.0) / av;
                  bb = coef * brow[n];
                  g_dt += g_bb * ab * brow[n];
                  if (gin[3]) (*gin[3])[tk * d.state + n] += g_bb * coef;
                  if (gin[2]) {
                    const double dcoef_da = (dt * ab * av - (ab - 1.0)) / (av * av);
                    (*gin[2])[e * d.state + n] += g_ab * ab * dt + g_bb * brow[n] * dcoef_da;
                  }
                }
                g_dt += g_ab * ab * av;
                g_x += gh[n] * bb;
                gh[n] *= ab;
              }
              if (gin[0]) (*gin[0])[xe] += g_x;
              if (gin[1]) (*gin[1])[xe] += g_dt;
            }
          }
        }
      });
}

Var rms_norm(Var x, Var gain, double eps) {
  const auto& sx = x.shape();
  const std::size_t dim = sx.back();
  if (gain.shape() != Shape{dim}) {
    throw std::invalid_argument("rms_norm: shape mismatch " + shape_str(sx) + " vs gain " + shape_str(gain.shape()));
  }
  const std::size_t rows = shape_numel(sx) / dim;
  return x.graph->apply(
      "rms_norm", {x, gain}, sx,
      [rows, dim, eps](TensorRefs in, Tensor& out) {
        const double* xp = in[0]->ptr();
        const double* g = in[1]->ptr();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = xp + r * dim;
          double ms = 0.0;
          for (std::size_t i = 0; i < dim; ++i) ms += xr[i] * xr[i];
          const double inv = 1.0 / std::sqrt(ms / static_cast<double>(dim) + eps);
          for (std::size_t i = 0; i < dim; ++i) out[r * dim + i] = xr[i] * inv * g[i];
        }
      },
      [rows, dim, eps](TensorRefs in, const Tensor&, const Tensor& gout, GradRefs gin) {
        const double* xp = in[0]->ptr();
        const double* g = in[1]->ptr();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = xp + r * dim;
          const double* gr = gout.ptr() + r * dim;
          double ms = 0.0, dot = 0.0;
          for (std::size_t i = 0; i < dim; ++i) {
            ms += xr[i] * xr[i];
            dot += gr[i] * g[i] * xr[i];
          }
          const double inv = 1.0 / std::sqrt(ms / static_cast<double>(dim) + eps);
          if (gin[0]) {
            const double k = inv * inv * inv * dot / static_cast<double>(dim);
            double* gx = gin[0]->ptr() + r * dim;
            for (std::size_t i = 0; i < dim; ++i) gx[i] += inv * g[i] * gr[i] - xr[i] * k;
          }
          if (gin[1]) {
            for (std::size_t i = 0; i < dim; ++i) (*gin[1])[i] += gr[i] * xr[i] * inv;
          }
        }
      });
}

std::vector<Parameter*> MambaLayerParams::all() const {
  return {in_w,     in_b,           gate_w,         gate_b,       conv_w,       conv_b,       ssm.a_log,
          ssm.dt_in, ssm.dt_proj_w, ssm.dt_proj_b, ssm.b_proj, ssm.c_proj, out_w, out_b};
}

std::vector<Parameter*> BMambaParams::all() const {
  std::vector<Parameter*> r;
  for (const auto* comp : {&forward, &backward}) {
    for (const auto& layer : *comp) {
      auto ps = layer.all();
      r.insert(r.end(), ps.begin(), ps.end());
    }
  }
  r.push_back(norm_forward);
  r.push_back(norm_backward);
  return r;
}

BMambaParams BMambaParams::tied() const {
  BMambaParams t = *this;
  t.backward = forward;
  t.norm_backward = norm_forward;
  return t;
}

MambaLayerParams make_mamba_layer(ParameterStore& store, const std::string& prefix, const MambaConfig& cfg,
                                  std::mt19937_64& rng) {
  const std::size_t dm = cfg.d_model, e = cfg.d_inner(), n = cfg.d_state, k = cfg.conv_kernel, r = cfg.rank();
  require(dm > 0 && n > 0 && k > 0 && cfg.expand > 0, "mamba layer: dimensions must be positive");
  MambaLayerParams p;
  p.discretization = cfg.discretization;
  p.residual = cfg.residual;
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(dm));
  const double e_bound = 1.0 / std::sqrt(static_cast<double>(e));
  p.in_w = &store.add(prefix + ".linear_input.weight", uniform(rng, {e, dm}, in_bound));
  p.in_b = &store.add(prefix + ".linear_input.bias", Tensor({e}, 0.0));
  p.gate_w = &store.add(prefix + ".linear_gated.weight", uniform(rng, {e, dm}, in_bound));
  p.gate_b = &store.add(prefix + ".linear_gated.bias", Tensor({e}, 0.0));
  p.conv_w = &store.add(prefix + ".conv1d.weight", uniform(rng, {e, 1, k}, 1.0 / std::sqrt(static_cast<double>(k))));
  p.conv_b = &store.add(prefix + ".conv1d.bias", Tensor({e}, 0.0));

  Tensor a_log({e, n});
  for (std::size_t i = 0; i < e; ++i) {
    for (std::size_t j = 0; j < n; ++j) a_log[i * n + j] = std::log(static_cast<double>(j + 1));
  }
  p.ssm.a_log = &store.add(prefix + ".ssm.a_log", std::move(a_log));
  p.ssm.dt_in = &store.add(prefix + ".ssm.dt_in.weight", uniform(rng, {r, e}, e_bound));
  p.ssm.dt_proj_w = &store.add(prefix + ".ssm.dt_proj.weight",
                               uniform(rng, {e, r}, 1.0 / std::sqrt(static_cast<double>(r))));
  // Step sizes start log-uniform in [1e-3, 1e-1]; the bias is their inverse softplus.
  Tensor dt_b({e});
  std::uniform_real_distribution<double> logu(std::log(1e-3), std::log(1e-1));
  for (auto& v : dt_b.data()) {
    const double dt = std::exp(logu(rng));
    v = dt + std::log(-std::expm1(-dt));
  }
  p.ssm.dt_proj_b = &store.add(prefix + ".ssm.dt_proj.bias", std::move(dt_b));
  p.ssm.b_proj = &store.add(prefix + ".ssm.b_proj.weight", uniform(rng, {n, e}, e_bound));
  p.ssm.c_proj = &store.add(prefix + ".ssm.c_proj.weight", uniform(rng, {n, e}, e_bound));
  p.out_w = &store.add(prefix + ".linear_output.weight", uniform(rng, {dm, e}, e_bound));
  p.out_b = &store.add(prefix + ".linear_output.bias", Tensor({dm}, 0.0));
  return p;
}

BMambaParams make_bmamba(ParameterStore& store, const std::string& prefix, const MambaConfig& cfg,
                         std::mt19937_64& rng) {
  BMambaParams p;
  for (std::size_t i = 0; i < 2; ++i) {
    p.forward[i] = make_mamba_layer(store, prefix + ".fwd.layer" + std::to_string(i), cfg, rng);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    p.backward[i] = make_mamba_layer(store, prefix + ".bwd.layer" + std::to_string(i), cfg, rng);
  }
  p.norm_forward = &store.add(prefix + ".rmsnorm_fwd.gain", Tensor({cfg.d_model}, 1.0));
  p.norm_backward = &store.add(prefix + ".rmsnorm_bwd.gain", Tensor({cfg.d_model}, 1.0));
  return p;
}

Var selective_ssm(Binder& bind, Var x, const SsmParams& p, Discretization mode) {
  Var dt_low = linear(x, bind(*p.dt_in));
  Var delta = softplus(linear(dt_low, bind(*p.dt_proj_w), bind(*p.dt_proj_b)));
  Var bm = linear(x, bind(*p.b_proj));
  Var cm = linear(x, bind(*p.c_proj));
  Var a = scale(exp(bind(*p.a_log)), -1.0);
  return selective_scan(x, delta, a, bm, cm, mode);
}

Var mamba_layer(Binder& bind, Var u, const MambaLayerParams& p) {
  const auto& su = u.shape();
  if (su.size() != 3 || su[2] != p.in_w->value.dim(1)) {
    throw std::invalid_argument("mamba_layer: input " + shape_str(su) + " does not match model width " +
                                std::to_string(p.in_w->value.dim(1)));
  }
  const std::size_t e = p.in_w->value.dim(0);
  Var u_hat = linear(u, bind(*p.in_w), bind(*p.in_b));
  Var z = linear(u, bind(*p.gate_w), bind(*p.gate_b));
  Var conv = conv1d(transpose(u_hat, {0, 2, 1}), bind(*p.conv_w), bind(*p.conv_b), e, true);
  Var x = silu(transpose(conv, {0, 2, 1}));
  Var y = mul(silu(z), selective_ssm(bind, x, p.ssm, p.discretization));
  return linear(y, bind(*p.out_w), bind(*p.out_b));
}

Var mamba_component(Binder& bind, Var u, const std::array<MambaLayerParams, 2>& layers) {
  Var x = u;
  for (const auto& layer : layers) {
    Var y = mamba_layer(bind, x, layer);
    x = layer.residual ? add(x, y) : y;
  }
  return x;
}

Var bmamba_block(Binder& bind, Var u, const BMambaParams& p) {
  Var f = rms_norm(mamba_component(bind, u, p.forward), bind(*p.norm_forward));
  Var b = flip(rms_norm(mamba_component(bind, flip(u, 1), p.backward), bind(*p.norm_backward)), 1);
  return add(f, b);
}

}  // namespace seld
