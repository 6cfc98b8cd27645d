// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "permflow/diff/tensor.hpp"

namespace permflow::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = n(rng);
  return t;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// max_i |a_i - b_i| / max(max|b|, floor)
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b,
                      double floor = 1e-8) {
  double num = 0.0, den = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / den;
}

/// Central differences of a scalar function, one coordinate at a time.
inline std::vector<double> fd_gradient(const std::function<double(const Tensor&)>& f,
                                       const Tensor& x, double h = 1e-5) {
  std::vector<double> g(x.size());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = xp[i];
    xp[i] = x0 + h;
    const double fp = f(xp);
    xp[i] = x0 - h;
    const double fm = f(xp);
    xp[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

inline Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out(x.shape(), 0.0);
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t k = 0; k < c; ++k) out.at(r, k) = x.at(perm[r], k);
  return out;
}

}  // namespace permflow::testing
