#include "seld/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "seld/ssm.hpp"

namespace seld {

double fit_exponent(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_exponent: need two or more points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) throw std::invalid_argument("fit_exponent: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

ScalingReport scan_scaling(const ScalingOptions& opts) {
  if (opts.lengths.size() < 2 || opts.repeats == 0) throw std::invalid_argument("scan_scaling: bad options");
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.01, 0.1), neg(-2.0, -0.1);
  const std::size_t e = opts.channels, n = opts.state;
  Tensor a({e, n});
  for (auto& v : a.data()) v = neg(rng);

  ScalingReport rep;
  std::vector<double> xs, ys;
  for (std::size_t len : opts.lengths) {
    Tensor x({1, len, e}), delta({1, len, e}), b({1, len, n}), c({1, len, n});
    for (auto& v : x.data()) v = u(rng);
    for (auto& v : delta.data()) v = pos(rng);
    for (auto& v : b.data()) v = u(rng);
    for (auto& v : c.data()) v = u(rng);
    volatile double sink = scan_forward(x, delta, a, b, c, Discretization::euler)[0];
    ScalingRow row;
    row.length = len;
    for (std::size_t r = 0; r < opts.repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      sink = sink + scan_forward(x, delta, a, b, c, Discretization::euler)[len * e - 1];
      row.samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::vector<double> sorted = row.samples;
    std::sort(sorted.begin(), sorted.end());
    row.median_seconds = sorted[sorted.size() / 2];
    xs.push_back(static_cast<double>(len));
    ys.push_back(row.median_seconds);
    rep.rows.push_back(std::move(row));
  }
  rep.exponent = fit_exponent(xs, ys);
  return rep;
}

std::string ScalingReport::to_text() const {
  std::ostringstream os;
  os << "L        median_ms\n";
  for (const ScalingRow& r : rows) {
    os << std::left << std::setw(8) << r.length << " " << std::fixed << std::setprecision(3)
       << r.median_seconds * 1e3 << "\n";
  }
  os << "growth exponent " << std::setprecision(3) << exponent << "\n";
  return os.str();
}

std::string ScalingReport::to_json() const {
  nlohmann::json j;
  for (const ScalingRow& r : rows) j["rows"].push_back({{"length", r.length}, {"median_seconds", r.median_seconds}});
  j["exponent"] = exponent;
  return j.dump(2);
}

}  // namespace seld
