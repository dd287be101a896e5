#pragma once
// Independent reference implementations used by the unit and acceptance tests.
// They share no code with the library beyond the plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <boost/rational.hpp>

#include "nowcast/grid.hpp"
#include "nowcast/network.hpp"
#include "nowcast/verif.hpp"

namespace oracle {

using Q = boost::rational<long long>;

struct Counts {
  long long h = 0, m = 0, fa = 0, cn = 0;
};

// positive means class >= min_class
inline Counts brute_counts(const nowcast::ClassGrid& pred, const nowcast::ClassGrid& truth,
                           const nowcast::ValidityMask& mask, int min_class) {
  Counts c;
  for (int y = 0; y < pred.height; ++y) {
    for (int x = 0; x < pred.width; ++x) {
      if (!mask(y, x)) continue;
      const bool p = pred(y, x) >= min_class;
      const bool t = truth(y, x) >= min_class;
      if (p && t) ++c.h;
      else if (t) ++c.m;
      else if (p) ++c.fa;
      else ++c.cn;
    }
  }
  return c;
}

inline std::optional<Q> div(long long a, long long b) {
  if (b == 0) return std::nullopt;
  return Q(a, b);
}

inline std::optional<Q> pod(const Counts& c) { return div(c.h, c.h + c.m); }
inline std::optional<Q> far(const Counts& c) { return div(c.fa, c.h + c.fa); }
inline std::optional<Q> sr(const Counts& c) { return div(c.h, c.h + c.fa); }
inline std::optional<Q> f1(const Counts& c) { return div(2 * c.h, 2 * c.h + c.m + c.fa); }
inline std::optional<Q> csi(const Counts& c) {
  if (c.h + c.m == 0 || c.h + c.fa == 0) return std::nullopt;
  return Q(c.h, c.h + c.m + c.fa);
}
inline std::optional<Q> bias(const Counts& c) { return div(c.h + c.fa, c.h + c.m); }

struct Avg {
  std::optional<Q> value;
  bool partial = false;
};

inline Avg average(const std::optional<Q>& a, const std::optional<Q>& b) {
  if (a && b) return {(*a + *b) / Q(2), false};
  if (a) return {a, true};
  if (b) return {b, true};
  return {};
}

/// Exact agreement of a library metric with the oracle value.
inline bool same(const nowcast::MetricValue& m, const Avg& o) {
  if (m.defined() != o.value.has_value()) return false;
  if (!o.value) return true;
  return m.partial == o.partial && m.exact->num() == o.value->numerator() &&
         m.exact->den() == o.value->denominator();
}

inline nowcast::ClassGrid random_grid(std::mt19937_64& rng, int h, int w, std::discrete_distribution<int>& d) {
  nowcast::ClassGrid g(h, w);
  for (auto& v : g.labels) v = static_cast<std::uint8_t>(d(rng));
  return g;
}

/// Central finite difference of `f` along coordinate i of `x`.
template <typename F>
double central_difference(F&& f, nowcast::Tensor x, std::size_t i, double eps) {
  const double x0 = x[i];
  x[i] = x0 + eps;
  const double up = f(x);
  x[i] = x0 - eps;
  const double down = f(x);
  return (up - down) / (2.0 * eps);
}

/// |a - b| relative to the larger magnitude, with an absolute floor for near-zero entries.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Multiplies each output by fixed random coefficients and sums: a generic smooth functional.
struct RandomProjection {
  std::vector<nowcast::Tensor> coeffs;

  RandomProjection(const nowcast::Network& net, const nowcast::Tensor& x, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    const auto acts = nowcast::forward(net, x);
    for (const auto& o : nowcast::network_outputs(net, acts)) {
      nowcast::Tensor c(o.channels(), o.height(), o.width());
      for (auto& v : c.values()) v = n(rng);
      coeffs.push_back(std::move(c));
    }
  }

  double operator()(std::span<const nowcast::Tensor> outs, std::span<nowcast::Tensor> grads) const {
    double s = 0.0;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      for (std::size_t i = 0; i < outs[k].size(); ++i) {
        s += coeffs[k][i] * outs[k][i];
        grads[k][i] = coeffs[k][i];
      }
    }
    return s;
  }

  double value(const nowcast::Network& net, const nowcast::Tensor& x) const {
    const auto acts = nowcast::forward(net, x);
    const auto outs = nowcast::network_outputs(net, acts);
    double s = 0.0;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      for (std::size_t i = 0; i < outs[k].size(); ++i) s += coeffs[k][i] * outs[k][i];
    }
    return s;
  }
};

}  // namespace oracle
