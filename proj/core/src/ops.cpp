#include "seld/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <cblas.h>

namespace seld {

namespace {

[[noreturn]] void shape_error(const std::string& prim, const Shape& a, const Shape& b) {
  throw std::invalid_argument(prim + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void shape_error(const std::string& prim, const std::string& what, const Shape& a) {
  throw std::invalid_argument(prim + ": " + what + ", got " + shape_str(a));
}

Graph& graph_of(Var a, Var b) {
  if (!a.graph || a.graph != b.graph) throw std::invalid_argument("operands live on different graphs");
  return *a.graph;
}

enum class Bcast { none, left_scalar, right_scalar };

Bcast broadcast_kind(const std::string& prim, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::none;
  if (shape_numel(a) == 1) return Bcast::left_scalar;
  if (shape_numel(b) == 1) return Bcast::right_scalar;
  shape_error(prim, a, b);
}

// c(m, n) += op(a) op(b), row-major, op(a) of shape (m, k) and op(b) of shape (k, n).
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c) {
  const auto mi = static_cast<blasint>(m), ni = static_cast<blasint>(n), ki = static_cast<blasint>(k);
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, mi, ni, ki, 1.0, a,
              ta ? mi : ki, b, tb ? ki : ni, 1.0, c, ni);
}

Shape out_shape(Bcast k, const Shape& a, const Shape& b) { return k == Bcast::left_scalar ? b : a; }

// Applies f(x) elementwise with derivative df(x, y).
template <typename F, typename DF>
Var unary(const char* name, Var x, F f, DF df) {
  return x.graph->apply(
      name, {x}, x.shape(),
      [f](TensorRefs in, Tensor& out) {
        const auto& a = *in[0];
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
      },
      [df](TensorRefs in, const Tensor& out, const Tensor& g, GradRefs gin) {
        if (!gin[0]) return;
        const auto& a = *in[0];
        auto& ga = *gin[0];
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] * df(a[i], out[i]);
      });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// outer x axis x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Var add(Var a, Var b) {
  auto& g = graph_of(a, b);
  auto k = broadcast_kind("add", a.shape(), b.shape());
  return g.apply(
      "add", {a, b}, out_shape(k, a.shape(), b.shape()),
      [k](TensorRefs in, Tensor& out) {
        const auto& x = *in[0];
        const auto& y = *in[1];
        for (std::size_t i = 0; i < out.size(); ++i) {
          out[i] = (k == Bcast::left_scalar ? x[0] : x[i]) + (k == Bcast::right_scalar ? y[0] : y[i]);
        }
      },
      [k](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        for (int side = 0; side < 2; ++side) {
          if (!gin[side]) continue;
          auto& gx = *gin[side];
          bool reduced = (side == 0 && k == Bcast::left_scalar) || (side == 1 && k == Bcast::right_scalar);
          if (reduced) {
            gx[0] += std::accumulate(g.data().begin(), g.data().end(), 0.0);
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
          }
        }
      });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  auto& g = graph_of(a, b);
  auto k = broadcast_kind("mul", a.shape(), b.shape());
  return g.apply(
      "mul", {a, b}, out_shape(k, a.shape(), b.shape()),
      [k](TensorRefs in, Tensor& out) {
        const auto& x = *in[0];
        const auto& y = *in[1];
        for (std::size_t i = 0; i < out.size(); ++i) {
          out[i] = (k == Bcast::left_scalar ? x[0] : x[i]) * (k == Bcast::right_scalar ? y[0] : y[i]);
        }
      },
      [k](TensorRefs in, const Tensor&, const Tensor& g, GradRefs gin) {
        const auto& x = *in[0];
        const auto& y = *in[1];
        auto xv = [&](std::size_t i) { return k == Bcast::left_scalar ? x[0] : x[i]; };
        auto yv = [&](std::size_t i) { return k == Bcast::right_scalar ? y[0] : y[i]; };
        if (gin[0]) {
          auto& gx = *gin[0];
          for (std::size_t i = 0; i < g.size(); ++i) gx[k == Bcast::left_scalar ? 0 : i] += g[i] * yv(i);
        }
        if (gin[1]) {
          auto& gy = *gin[1];
          for (std::size_t i = 0; i < g.size(); ++i) gy[k == Bcast::right_scalar ? 0 : i] += g[i] * xv(i);
        }
      });
}

Var scale(Var x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double value) {
  return unary(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
  auto& g = graph_of(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_error("matmul", sa, sb);
  const std::size_t m = sa[0], kk = sa[1], n = sb[1];
  return g.apply(
      "matmul", {a, b}, {m, n},
      [m, kk, n](TensorRefs in, Tensor& out) {
        const double* x = in[0]->ptr();
        const double* y = in[1]->ptr();
        double* o = out.ptr();
        std::fill(o, o + m * n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < kk; ++p) {
            double xv = x[i * kk + p];
            const double* yr = y + p * n;
            double* orow = o + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yr[j];
          }
        }
      },
      [m, kk, n](TensorRefs in, const Tensor&, const Tensor& gout, GradRefs gin) {
        const double* x = in[0]->ptr();
        const double* y = in[1]->ptr();
        const double* go = gout.ptr();
        if (gin[0]) {
          double* gx = gin[0]->ptr();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < kk; ++p) {
              const double* yr = y + p * n;
              const double* gr = go + i * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += gr[j] * yr[j];
              gx[i * kk + p] += acc;
            }
          }
        }
        if (gin[1]) {
          double* gy = gin[1]->ptr();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < kk; ++p) {
              double xv = x[i * kk + p];
              const double* gr = go + i * n;
              double* gyr = gy + p * n;
              for (std::size_t j = 0; j < n; ++j) gyr[j] += xv * gr[j];
            }
          }
        }
      });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  auto& g = graph_of(x, weight);
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sw.size() != 2 || sx.back() != sw[1]) shape_error("linear", sx, sw);
  const std::size_t in_f = sw[1], out_f = sw[0];
  const std::size_t rows = shape_numel(sx) / in_f;
  std::vector<Var> ins{x, weight};
  if (bias) {
    graph_of(x, *bias);
    if (bias->shape() != Shape{out_f}) shape_error("linear(bias)", bias->shape(), Shape{out_f});
    ins.push_back(*bias);
  }
  Shape os = sx;
  os.back() = out_f;
  const bool has_bias = bias.has_value();
  return g.apply(
      "linear", ins, os,
      [rows, in_f, out_f, has_bias](TensorRefs in, Tensor& out) {
        double* o = out.ptr();
        if (has_bias) {
          for (std::size_t r = 0; r < rows; ++r) std::copy(in[2]->ptr(), in[2]->ptr() + out_f, o + r * out_f);
        } else {
          out.fill(0.0);
        }
        gemm(false, true, rows, out_f, in_f, in[0]->ptr(), in[1]->ptr(), o);
      },
      [rows, in_f, out_f, has_bias](TensorRefs in, const Tensor&, const Tensor& gout, GradRefs gin) {
        const double* go = gout.ptr();
        if (gin[0]) gemm(false, false, rows, in_f, out_f, go, in[1]->ptr(), gin[0]->ptr());
        if (gin[1]) gemm(true, false, out_f, in_f, rows, go, in[0]->ptr(), gin[1]->ptr());
        if (has_bias && gin[2]) {
          double* gb = gin[2]->ptr();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < out_f; ++j) gb[j] += go[r * out_f + j];
          }
        }
      });
}

Var conv1d(Var x, Var weight, std::optional<Var> bias, std::size_t groups, bool causal) {
  auto& g = graph_of(x, weight);
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sx.size() != 3) shape_error("conv1d", "expected input (B, C, L)", sx);
  if (sw.size() != 3) shape_error("conv1d", "expected weight (C_out, C_in/groups, K)", sw);
  const std::size_t batch = sx[0], c_in = sx[1], len = sx[2];
  const std::size_t c_out = sw[0], k = sw[2];
  if (groups == 0 || c_in % groups || c_out % groups || sw[1] != c_in / groups) shape_error("conv1d", sx, sw);
  if (!causal && k % 2 == 0) shape_error("conv1d", "non-causal kernel width must be odd", sw);
  const std::size_t cin_g = c_in / groups, cout_g = c_out / groups;
  const std::ptrdiff_t pad = causal ? static_cast<std::ptrdiff_t>(k - 1) : static_cast<std::ptrdiff_t>(k / 2);
  std::vector<Var> ins{x, weight};
  if (bias) {
    graph_of(x, *bias);
    if (bias->shape() != Shape{c_out}) shape_error("conv1d(bias)", bias->shape(), Shape{c_out});
    ins.push_back(*bias);
  }
  const bool has_bias = bias.has_value();
  // out[b, co, t] = bias[co] + sum_{ci in group, j} w[co, ci', j] * x[b, ci, t + j - pad]
  return g.apply(
      "conv1d", ins, {batch, c_out, len},
      [=](TensorRefs in, Tensor& out) {
        const double* xp = in[0]->ptr();
        const double* w = in[1]->ptr();
        double* o = out.ptr();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t co = 0; co < c_out; ++co) {
            double* orow = o + (b * c_out + co) * len;
            std::fill(orow, orow + len, has_bias ? (*in[2])[co] : 0.0);
            const std::size_t grp = co / cout_g;
            for (std::size_t cl = 0; cl < cin_g; ++cl) {
              const std::size_t ci = grp * cin_g + cl;
              const double* xrow = xp + (b * c_in + ci) * len;
              for (std::size_t j = 0; j < k; ++j) {
                const double wv = w[(co * cin_g + cl) * k + j];
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad;
                const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -shift);
                const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(len, static_cast<std::ptrdiff_t>(len) - shift);
                for (std::ptrdiff_t t = t0; t < t1; ++t) orow[t] += wv * xrow[t + shift];
              }
            }
          }
        }
      },
      [=](TensorRefs in, const Tensor&, const Tensor& gout, GradRefs gin) {
        const double* xp = in[0]->ptr();
        const double* w = in[1]->ptr();
        const double* go = gout.ptr();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t co = 0; co < c_out; ++co) {
            const double* grow = go + (b * c_out + co) * len;
            if (has_bias && gin[2]) {
              double s = 0.0;
              for (std::size_t t = 0; t < len; ++t) s += grow[t];
              (*gin[2])[co] += s;
            }
            const std::size_t grp = co / cout_g;
            for (std::size_t cl = 0; cl < cin_g; ++cl) {
              const std::size_t ci = grp * cin_g + cl;
              const double* xrow = xp + (b * c_in + ci) * len;
              for (std::size_t j = 0; j < k; ++j) {
                const std::size_t widx = (co * cin_g + cl) * k + j;
                const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad;
                const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -shift);
                const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(len, static_cast<std::ptrdiff_t>(len) - shift);
                if (gin[0]) {
                  double* gx = gin[0]->ptr() + (b * c_in + ci) * len;
                  const double wv = w[widx];
                  for (std::ptrdiff_t t = t0; t < t1; ++t) gx[t + shift] += wv * grow[t];
                }
                if (gin[1]) {
                  double s = 0.0;
                  for (std::ptrdiff_t t = t0; t < t1; ++t) s += grow[t] * xrow[t + shift];
                  (*gin[1])[widx] += s;
                }
              }
            }
          }
        }
      });
}

Var conv2d(Var x, Var weight, std::optional<Var> bias) {
  auto& g = graph_of(x, weight);
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  if (sx.size() != 4) shape_error("conv2d", "expected input (B, C, H, W)", sx);
  if (sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0) shape_error("conv2d", sx, sw);
  const std::size_t batch = sx[0], c_in = sx[1], h = sx[2], wd = sx[3];
  const std::size_t c_out = sw[0], k = sw[2];
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<Var> ins{x, weight};
  if (bias) {
    graph_of(x, *bias);
    if (bias->shape() != Shape{c_out}) shape_error("conv2d(bias)", bias->shape(), Shape{c_out});
    ins.push_back(*bias);
  }
  const bool has_bias = bias.has_value();
  const std::size_t plane = h * wd, taps = k * k, ck = c_in * taps;
  // cols(ci * k^2 + tap, y * W + x) = x(ci, y + dy, x + dx), zero outside the image.
  auto im2col = [=](const double* ip, double* cols) {
    std::fill(cols, cols + ck * plane, 0.0);
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      for (std::size_t tap = 0; tap < taps; ++tap) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(tap / k) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(tap % k) - pad;
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min<std::ptrdiff_t>(h, h - dy);
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min<std::ptrdiff_t>(wd, wd - dx);
        double* row = cols + (ci * taps + tap) * plane;
        const double* src = ip + ci * plane;
        for (std::ptrdiff_t y = y0; y < y1; ++y) {
          std::copy(src + (y + dy) * wd + x0 + dx, src + (y + dy) * wd + x1 + dx, row + y * wd + x0);
        }
      }
    }
  };
  auto col2im = [=](const double* cols, double* gp) {
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      for (std::size_t tap = 0; tap < taps; ++tap) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(tap / k) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(tap % k) - pad;
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min<std::ptrdiff_t>(h, h - dy);
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min<std::ptrdiff_t>(wd, wd - dx);
        const double* row = cols + (ci * taps + tap) * plane;
        double* dst = gp + ci * plane;
        for (std::ptrdiff_t y = y0; y < y1; ++y) {
          double* d = dst + (y + dy) * wd + dx;
          const double* r = row + y * wd;
          for (std::ptrdiff_t xx = x0; xx < x1; ++xx) d[xx] += r[xx];
        }
      }
    }
  };
  return g.apply(
      "conv2d", ins, {batch, c_out, h, wd},
      [=](TensorRefs in, Tensor& out) {
        std::vector<double> cols(ck * plane);
        for (std::size_t b = 0; b < batch; ++b) {
          double* op = out.ptr() + b * c_out * plane;
          for (std::size_t co = 0; co < c_out; ++co) {
            std::fill(op + co * plane, op + (co + 1) * plane, has_bias ? (*in[2])[co] : 0.0);
          }
          im2col(in[0]->ptr() + b * c_in * plane, cols.data());
          gemm(false, false, c_out, plane, ck, in[1]->ptr(), cols.data(), op);
        }
      },
      [=](TensorRefs in, const Tensor&, const Tensor& gout, GradRefs gin) {
        std::vector<double> cols(ck * plane);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* gp = gout.ptr() + b * c_out * plane;
          if (has_bias && gin[2]) {
            for (std::size_t co = 0; co < c_out; ++co) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += gp[co * plane + i];
              (*gin[2])[co] += acc;
            }
          }
          if (gin[1]) {
            im2col(in[0]->ptr() + b * c_in * plane, cols.data());
            gemm(false, true, c_out, ck, plane, gp, cols.data(), gin[1]->ptr());
          }
          if (gin[0]) {
            std::fill(cols.begin(), cols.end(), 0.0);
            gemm(true, false, ck, plane, c_out, in[1]->ptr(), gp, cols.data());
            col2im(cols.data(), gin[0]->ptr() + b * c_in * plane);
          }
        }
      });
}

Var avg_pool2d(Var x, std::size_t pool_h, std::size_t pool_w) {
  const auto& sx = x.shape();
  if (sx.size() != 4) shape_error("avg_pool2d", "expected input (B, C, H, W)", sx);
  if (pool_h == 0 || pool_w == 0 || sx[2] % pool_h || sx[3] % pool_w) {
    throw std::invalid_argument("avg_pool2d: spatial dims " + shape_str(sx) + " not divisible by pool (" +
                                std::to_string(pool_h) + "," + std::to_string(pool_w) + ")");
  }
  const std::size_t planes = sx[0] * sx[1], h = sx[2], w = sx[3];
  const std::size_t oh = h / pool_h, ow = w / pool_w;
  const double inv = 1.0 / static_cast<double>(pool_h * pool_w);
  return x.graph->apply(
      "avg_pool2d", {x}, {sx[0], sx[1], oh, ow},
      [=](TensorRefs in, Tensor& out) {
        const double* ip = in[0]->ptr();
        double* o = out.ptr();
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
              double s = 0.0;
              for (std::size_t a = 0; a < pool_h; ++a) {
                const double* row = ip + (p * h + i * pool_h + a) * w + j * pool_w;
                for (std::size_t c = 0; c < pool_w; ++c) s += row[c];
              }
              o[(p * oh + i) * ow + j] = s * inv;
            }
          }
        }
      },
      [=](TensorRefs, const Tensor&, const Tensor& gout, GradRefs gin) {
        if (!gin[0]) return;
        double* gx = gin[0]->ptr();
        const double* go = gout.ptr();
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
              const double gv = go[(p * oh + i) * ow + j] * inv;
              for (std::size_t a = 0; a < pool_h; ++a) {
                double* row = gx + (p * h + i * pool_h + a) * w + j * pool_w;
                for (std::size_t c = 0; c < pool_w; ++c) row[c] += gv;
              }
            }
          }
        }
      });
}

Var sigmoid(Var x) {
  return unary(
      "sigmoid", x, [](double v) { return sigmoid_scalar(v); }, [](double, double y) { return y * (1.0 - y); });
}

Var silu(Var x) {
  return unary(
      "silu", x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Var softplus(Var x) {
  return unary(
      "softplus", x, [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return sigmoid_scalar(v); });
}

Var exp(Var x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var tanh(Var x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sum(Var x) {
  return x.graph->apply(
      "sum", {x}, {1},
      [](TensorRefs in, Tensor& out) {
        out[0] = std::accumulate(in[0]->data().begin(), in[0]->data().end(), 0.0);
      },
      [](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        if (!gin[0]) return;
        for (auto& v : gin[0]->data()) v += g[0];
      });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Var sum_axis(Var x, std::size_t axis) {
  const auto& sx = x.shape();
  if (axis >= sx.size()) shape_error("sum_axis", "axis out of range", sx);
  Shape os;
  for (std::size_t i = 0; i < sx.size(); ++i) {
    if (i != axis) os.push_back(sx[i]);
  }
  if (os.empty()) os = {1};
  const auto sp = split_at(sx, axis);
  return x.graph->apply(
      "sum_axis", {x}, os,
      [sp](TensorRefs in, Tensor& out) {
        const double* ip = in[0]->ptr();
        out.fill(0.0);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          double* orow = out.ptr() + o * sp.inner;
          for (std::size_t a = 0; a < sp.extent; ++a) {
            const double* irow = ip + (o * sp.extent + a) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) orow[i] += irow[i];
          }
        }
      },
      [sp](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        if (!gin[0]) return;
        double* gx = gin[0]->ptr();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* grow = g.ptr() + o * sp.inner;
          for (std::size_t a = 0; a < sp.extent; ++a) {
            double* xrow = gx + (o * sp.extent + a) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) xrow[i] += grow[i];
          }
        }
      });
}

Var mean_axis(Var x, std::size_t axis) {
  if (axis >= x.shape().size()) shape_error("mean_axis", "axis out of range", x.shape());
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

Var reshape(Var x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  return x.graph->apply(
      "reshape", {x}, shape,
      [](TensorRefs in, Tensor& out) { std::copy(in[0]->data().begin(), in[0]->data().end(), out.ptr()); },
      [](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
      });
}

Var transpose(Var x, std::vector<std::size_t> perm) {
  const auto sx = x.shape();
  const std::size_t r = sx.size();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) shape_error("transpose", "permutation rank differs from input", sx);
  for (auto p : perm) {
    if (p >= r || seen[p]) shape_error("transpose", "invalid axis permutation", sx);
    seen[p] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = sx[perm[i]];
  const auto in_strides = strides_of(sx);
  // For each output position, the input offset step along output axis i.
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) step[i] = in_strides[perm[i]];
  auto walk = [os, step, r](auto&& fn) {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    const std::size_t n = shape_numel(os);
    for (std::size_t dst = 0; dst < n; ++dst) {
      fn(dst, src);
      for (std::size_t ax = r; ax-- > 0;) {
        if (++idx[ax] < os[ax]) {
          src += step[ax];
          break;
        }
        src -= step[ax] * (os[ax] - 1);
        idx[ax] = 0;
      }
    }
  };
  return x.graph->apply(
      "transpose", {x}, os,
      [walk](TensorRefs in, Tensor& out) {
        const double* ip = in[0]->ptr();
        double* o = out.ptr();
        walk([&](std::size_t dst, std::size_t src) { o[dst] = ip[src]; });
      },
      [walk](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        if (!gin[0]) return;
        double* gx = gin[0]->ptr();
        walk([&](std::size_t dst, std::size_t src) { gx[src] += g[dst]; });
      });
}

Var flip(Var x, std::size_t axis) {
  const auto& sx = x.shape();
  if (axis >= sx.size()) shape_error("flip", "axis out of range", sx);
  const auto sp = split_at(sx, axis);
  auto map = [sp](auto&& fn) {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t a = 0; a < sp.extent; ++a) {
        const std::size_t dst = (o * sp.extent + a) * sp.inner;
        const std::size_t src = (o * sp.extent + (sp.extent - 1 - a)) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) fn(dst + i, src + i);
      }
    }
  };
  return x.graph->apply(
      "flip", {x}, sx,
      [map](TensorRefs in, Tensor& out) {
        const double* ip = in[0]->ptr();
        double* o = out.ptr();
        map([&](std::size_t d, std::size_t s) { o[d] = ip[s]; });
      },
      [map](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        if (!gin[0]) return;
        double* gx = gin[0]->ptr();
        map([&](std::size_t d, std::size_t s) { gx[s] += g[d]; });
      });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& sx = x.shape();
  if (axis >= sx.size() || length == 0 || start + length > sx[axis]) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                ") on axis " + std::to_string(axis) + " out of bounds for " + shape_str(sx));
  }
  Shape os = sx;
  os[axis] = length;
  const auto sp = split_at(sx, axis);
  auto map = [sp, start, length](auto&& fn) {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const std::size_t src = (o * sp.extent + start) * sp.inner;
      const std::size_t dst = o * length * sp.inner;
      for (std::size_t i = 0; i < length * sp.inner; ++i) fn(dst + i, src + i);
    }
  };
  return x.graph->apply(
      "slice", {x}, os,
      [map](TensorRefs in, Tensor& out) {
        const double* ip = in[0]->ptr();
        double* o = out.ptr();
        map([&](std::size_t d, std::size_t s) { o[d] = ip[s]; });
      },
      [map](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        if (!gin[0]) return;
        double* gx = gin[0]->ptr();
        map([&](std::size_t d, std::size_t s) { gx[s] += g[d]; });
      });
}

Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape base = xs[0].shape();
  if (axis >= base.size()) shape_error("concat", "axis out of range", base);
  Shape os = base;
  os[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& v : xs) {
    graph_of(xs[0], v);
    const auto& s = v.shape();
    if (s.size() != base.size()) shape_error("concat", base, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != base[i]) shape_error("concat", base, s);
    }
    extents.push_back(s[axis]);
    os[axis] += s[axis];
  }
  const auto sp = split_at(os, axis);
  return xs[0].graph->apply(
      "concat", xs, os,
      [sp, extents](TensorRefs in, Tensor& out) {
        double* o = out.ptr();
        std::size_t at = 0;
        for (std::size_t p = 0; p < in.size(); ++p) {
          const std::size_t chunk = extents[p] * sp.inner;
          const double* ip = in[p]->ptr();
          for (std::size_t oo = 0; oo < sp.outer; ++oo) {
            std::copy(ip + oo * chunk, ip + (oo + 1) * chunk, o + (oo * sp.extent + at) * sp.inner);
          }
          at += extents[p];
        }
      },
      [sp, extents](TensorRefs, const Tensor&, const Tensor& g, GradRefs gin) {
        std::size_t at = 0;
        for (std::size_t p = 0; p < gin.size(); ++p) {
          const std::size_t chunk = extents[p] * sp.inner;
          if (gin[p]) {
            double* gx = gin[p]->ptr();
            for (std::size_t oo = 0; oo < sp.outer; ++oo) {
              const double* src = g.ptr() + (oo * sp.extent + at) * sp.inner;
              for (std::size_t i = 0; i < chunk; ++i) gx[oo * chunk + i] += src[i];
            }
          }
          at += extents[p];
        }
      });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormMode mode, BatchNormBuffers buffers, double eps) {
  auto& g = graph_of(x, gamma);
  graph_of(x, beta);
  const auto& sx = x.shape();
  if (sx.size() < 2) shape_error("batch_norm", "expected input (B, C, ...)", sx);
  const std::size_t batch = sx[0], ch = sx[1];
  const std::size_t inner = shape_numel(sx) / (batch * ch);
  if (gamma.shape() != Shape{ch}) shape_error("batch_norm(gamma)", gamma.shape(), Shape{ch});
  if (beta.shape() != Shape{ch}) shape_error("batch_norm(beta)", beta.shape(), Shape{ch});
  if (mode == BatchNormMode::inference && (!buffers.running_mean || !buffers.running_var)) {
    throw std::invalid_argument("batch_norm: inference mode needs running statistics");
  }
  const double count = static_cast<double>(batch * inner);
  if (mode == BatchNormMode::training && count < 2) {
    throw std::invalid_argument("batch_norm: training mode needs more than one value per channel, got " +
                                shape_str(sx));
  }
  // Per-channel statistics of the last forward pass, shared with backward.
  auto stats = std::make_shared<std::vector<double>>(2 * ch);
  return g.apply(
      "batch_norm", {x, gamma, beta}, sx,
      [=](TensorRefs in, Tensor& out) {
        const double* xp = in[0]->ptr();
        const double* gm = in[1]->ptr();
        const double* bt = in[2]->ptr();
        double* o = out.ptr();
        auto& st = *stats;
        for (std::size_t c = 0; c < ch; ++c) {
          double mu, var;
          if (mode == BatchNormMode::training) {
            double s = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
              const double* p = xp + (b * ch + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) s += p[i];
            }
            mu = s / count;
            double v = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
              const double* p = xp + (b * ch + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) v += (p[i] - mu) * (p[i] - mu);
            }
            var = v / count;
            if (buffers.running_mean && buffers.running_var) {
              auto& rm = buffers.running_mean->value[c];
              auto& rv = buffers.running_var->value[c];
              rm = (1.0 - buffers.momentum) * rm + buffers.momentum * mu;
              rv = (1.0 - buffers.momentum) * rv + buffers.momentum * v / (count - 1.0);
            }
          } else {
            mu = buffers.running_mean->value[c];
            var = buffers.running_var->value[c];
          }
          const double inv_std = 1.0 / std::sqrt(var + eps);
          st[2 * c] = mu;
          st[2 * c + 1] = inv_std;
          for (std::size_t b = 0; b < batch; ++b) {
            const double* p = xp + (b * ch + c) * inner;
            double* q = o + (b * ch + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) q[i] = (p[i] - mu) * inv_std * gm[c] + bt[c];
          }
        }
      },
      [=](TensorRefs in, const Tensor&, const Tensor& gout, GradRefs gin) {
        const double* xp = in[0]->ptr();
        const double* gm = in[1]->ptr();
        const double* go = gout.ptr();
        const auto& st = *stats;
        for (std::size_t c = 0; c < ch; ++c) {
          const double mu = st[2 * c], inv_std = st[2 * c + 1];
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const double* p = xp + (b * ch + c) * inner;
            const double* gp = go + (b * ch + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_g += gp[i];
              sum_gx += gp[i] * (p[i] - mu) * inv_std;
            }
          }
          if (gin[1]) (*gin[1])[c] += sum_gx;
          if (gin[2]) (*gin[2])[c] += sum_g;
          if (!gin[0]) continue;
          for (std::size_t b = 0; b < batch; ++b) {
            const double* p = xp + (b * ch + c) * inner;
            const double* gp = go + (b * ch + c) * inner;
            double* gx = gin[0]->ptr() + (b * ch + c) * inner;
            if (mode == BatchNormMode::training) {
              for (std::size_t i = 0; i < inner; ++i) {
                const double xhat = (p[i] - mu) * inv_std;
                gx[i] += gm[c] * inv_std * (gp[i] - sum_g / count - xhat * sum_gx / count);
              }
            } else {
              for (std::size_t i = 0; i < inner; ++i) gx[i] += gm[c] * inv_std * gp[i];
            }
          }
        }
      });
}

}  // namespace seld
