// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <doctest.h>
#include <unistd.h>

#include "lora_forensics/matrix.hpp"
#include "lora_forensics/spectral.hpp"

namespace lftest {

inline lf::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& gen,
                                double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  lf::Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(gen);
  return m;
}

inline lf::Matrix random_symmetric(std::size_t n, std::mt19937_64& gen, double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  lf::Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = dist(gen);
      m(i, j) = v;
      m(j, i) = v;
    }
  }
  return m;
}

inline lf::Matrix random_orthogonal(std::size_t n, std::mt19937_64& gen) {
  return lf::thin_qr(random_matrix(n, n, gen)).q;
}

// max_i |a_i - b_i| / scale
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double scale) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(a[i] - b[i]));
  }
  return scale > 0.0 ? worst / scale : worst;
}

// Characteristic polynomial coefficients via Faddeev-LeVerrier:
// p(x) = x^n + c[n-1] x^(n-1) + ... + c[0].
inline std::vector<double> characteristic_polynomial(const lf::Matrix& a) {
  const std::size_t n = a.rows();
  std::vector<double> c(n, 0.0);
  lf::Matrix m = a;
  for (std::size_t k = 1; k <= n; ++k) {
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i) trace += m(i, i);
    c[n - k] = -trace / static_cast<double>(k);
    if (k == n) break;
    lf::Matrix shifted = m;
    for (std::size_t i = 0; i < n; ++i) shifted(i, i) += c[n - k];
    m = lf::multiply(a, shifted);
  }
  return c;
}

// Durand-Kerner root finder; fine for the n <= 4 oracle comparisons.
inline std::vector<double> real_polynomial_roots(const std::vector<double>& c) {
  const std::size_t n = c.size();
  using C = std::complex<double>;
  const auto eval = [&](C x) {
    C p(1.0, 0.0);
    for (std::size_t k = n; k-- > 0;) p = p * x + c[k];
    return p;
  };
  std::vector<C> roots(n);
  const C start(0.4, 0.9);
  C acc(1.0, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    acc *= start;
    roots[i] = acc;
  }
  for (int iter = 0; iter < 500; ++iter) {
    double moved = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      C denom(1.0, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) denom *= roots[i] - roots[j];
      }
      const C delta = eval(roots[i]) / denom;
      roots[i] -= delta;
      moved = std::max(moved, std::abs(delta));
    }
    if (moved < 1e-14) break;
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = roots[i].real();
  std::sort(out.begin(), out.end(), std::greater<double>());
  return out;
}

// Fresh scratch directory under the system temp root.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() /
      ("lf_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace lftest
