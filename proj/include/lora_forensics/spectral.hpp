// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "lora_forensics/error.hpp"
#include "lora_forensics/matrix.hpp"

namespace lf {

// Ordered singular values, non-increasing, non-negative. Producers guarantee
// the ordering invariant.
using Spectrum = std::vector<double>;

struct SymmetricEigOptions {
  double off_diag_tol = 1e-12;  // relative to ||S||_F
  int max_sweeps = 100;
  std::size_t size_cap = 4096;
};

// Eigenvalues of a symmetric matrix, descending, via cyclic Jacobi rotations.
// The input must be symmetric within off_diag_tol * ||S||_F; it is averaged
// with its transpose before iterating so rotations see an exactly symmetric
// matrix.
inline std::vector<double> symmetric_eigenvalues(const Matrix& s,
                                                 const SymmetricEigOptions& opt = {}) {
  const std::size_t n = s.rows();
  if (s.cols() != n) {
    raise(ErrorCode::DimensionMismatch, "eigenvalues of a non-square matrix");
  }
  if (n > opt.size_cap) {
    raise(ErrorCode::DimensionMismatch, "matrix exceeds the configured size cap");
  }
  if (!s.all_finite()) {
    raise(ErrorCode::NonFiniteInput, "symmetric eigensolver input has non-finite entries");
  }
  const double scale = s.frobenius_norm();
  const double sym_tol = opt.off_diag_tol * scale;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::fabs(s(i, j) - s(j, i)) > sym_tol) {
        raise(ErrorCode::NotSymmetric, "matrix is not symmetric within tolerance");
      }
    }
  }

  Matrix a = s;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = avg;
      a(j, i) = avg;
    }
  }

  const double thresh = opt.off_diag_tol * scale;
  bool converged = n < 2;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::fabs(a(p, q)));
    }
    if (off <= thresh) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double diff = a(q, q) - a(p, p);
        const double theta = diff / (2.0 * apq);
        double t;
        if (std::fabs(theta) > 1e150) {
          t = 1.0 / (2.0 * theta);  // sqrt(theta^2) would overflow
        } else {
          t = 1.0 / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
          if (theta < 0.0) t = -t;
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        a(p, p) -= t * apq;
        a(q, q) += t * apq;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (i == p || i == q) continue;
          const double aip = a(i, p);
          const double aiq = a(i, q);
          a(i, p) = c * aip - sn * aiq;
          a(p, i) = a(i, p);
          a(i, q) = sn * aip + c * aiq;
          a(q, i) = a(i, q);
        }
      }
    }
  }
  if (!converged) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::fabs(a(p, q)));
    }
    if (off > thresh) {
      raise(ErrorCode::NoConvergence, "Jacobi eigensolver hit the sweep cap");
    }
  }

  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<double>());
  return eig;
}

// R factor of the thin Householder QR of a tall matrix (rows >= cols).
// Works on the transpose so reflections walk contiguous memory.
inline Matrix qr_upper_factor(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m < n) {
    raise(ErrorCode::DimensionMismatch, "thin QR needs rows >= cols");
  }
  Matrix t = a.transposed();  // row j of t is column j of a
  Matrix r(n, n);
  std::vector<double> v(m);
  for (std::size_t j = 0; j < n; ++j) {
    double* col = t.row(j);
    double norm2 = 0.0;
    for (std::size_t i = j; i < m; ++i) norm2 += col[i] * col[i];
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) continue;  // rank-deficient column, R row stays zero
    const double alpha = col[j] >= 0.0 ? -norm : norm;
    v[j] = col[j] - alpha;
    double vnorm2 = v[j] * v[j];
    for (std::size_t i = j + 1; i < m; ++i) {
      v[i] = col[i];
      vnorm2 += v[i] * v[i];
    }
    r(j, j) = alpha;
    for (std::size_t c = j + 1; c < n; ++c) {
      double* cc = t.row(c);
      double dot = 0.0;
      for (std::size_t i = j; i < m; ++i) dot += v[i] * cc[i];
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = j; i < m; ++i) cc[i] -= f * v[i];
      r(j, c) = cc[j];
    }
  }
  return r;
}

struct ThinQr {
  Matrix q;  // rows x cols, orthonormal columns
  Matrix r;  // cols x cols, upper triangular
};

// Thin Householder QR with the explicit Q. Q's columns are orthonormal for
// any input, including rank-deficient ones (skipped reflections act as
// identities on an orthonormal frame).
inline ThinQr thin_qr(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m < n) {
    raise(ErrorCode::DimensionMismatch, "thin QR needs rows >= cols");
  }
  Matrix t = a.transposed();
  Matrix r(n, n);
  std::vector<std::vector<double>> reflectors(n);
  std::vector<double> vnorm2s(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double* col = t.row(j);
    double norm2 = 0.0;
    for (std::size_t i = j; i < m; ++i) norm2 += col[i] * col[i];
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) continue;
    const double alpha = col[j] >= 0.0 ? -norm : norm;
    std::vector<double> v(m, 0.0);
    v[j] = col[j] - alpha;
    double vnorm2 = v[j] * v[j];
    for (std::size_t i = j + 1; i < m; ++i) {
      v[i] = col[i];
      vnorm2 += v[i] * v[i];
    }
    r(j, j) = alpha;
    for (std::size_t c = j + 1; c < n; ++c) {
      double* cc = t.row(c);
      double dot = 0.0;
      for (std::size_t i = j; i < m; ++i) dot += v[i] * cc[i];
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = j; i < m; ++i) cc[i] -= f * v[i];
      r(j, c) = cc[j];
    }
    reflectors[j] = std::move(v);
    vnorm2s[j] = vnorm2;
  }

  // Column c of Q is H_0 ... H_{n-1} e_c; build Q^T so each column is a
  // contiguous row while the reflectors are applied.
  Matrix qt(n, m);
  for (std::size_t c = 0; c < n; ++c) {
    double* out = qt.row(c);
    out[c] = 1.0;
    for (std::size_t jj = n; jj-- > 0;) {
      if (vnorm2s[jj] == 0.0) continue;
      const std::vector<double>& v = reflectors[jj];
      double dot = 0.0;
      for (std::size_t i = jj; i < m; ++i) dot += v[i] * out[i];
      const double f = 2.0 * dot / vnorm2s[jj];
      for (std::size_t i = jj; i < m; ++i) out[i] -= f * v[i];
    }
  }
  return {qt.transposed(), std::move(r)};
}

// Singular values of a factor matrix: symmetric eigendecomposition of the
// Gram matrix on the smaller side, negative eigenvalues clamped, square
// roots sorted non-increasing. Returns min(rows, cols) values, which for a
// LoRA factor is the declared rank.
inline Spectrum factor_spectrum(const Matrix& f) {
  if (!f.all_finite()) {
    raise(ErrorCode::NonFiniteInput, "factor has non-finite entries");
  }
  if (f.rows() == 0 || f.cols() == 0) {
    raise(ErrorCode::DimensionMismatch, "factor is empty");
  }
  const Matrix g = f.rows() <= f.cols() ? gram_rows(f) : gram_cols(f);
  std::vector<double> eig = symmetric_eigenvalues(g);
  Spectrum sigma(eig.size());
  for (std::size_t i = 0; i < eig.size(); ++i) {
    sigma[i] = eig[i] > 0.0 ? std::sqrt(eig[i]) : 0.0;
  }
  return sigma;
}

// Singular values of the product B*A without materializing it: thin-QR both
// factors and take the spectrum of the rank-sized core R_B * R_A^T. Returns
// exactly rank(B cols) values.
inline Spectrum product_spectrum(const Matrix& b, const Matrix& a) {
  if (b.cols() != a.rows()) {
    raise(ErrorCode::DimensionMismatch, "factor inner dimensions disagree");
  }
  const std::size_t r = b.cols();
  if (r == 0 || b.rows() < r || a.cols() < r) {
    raise(ErrorCode::DimensionMismatch, "rank exceeds a factor dimension");
  }
  if (!b.all_finite() || !a.all_finite()) {
    raise(ErrorCode::NonFiniteInput, "factor has non-finite entries");
  }
  const Matrix rb = qr_upper_factor(b);
  const Matrix ra = qr_upper_factor(a.transposed());
  const Matrix core = multiply(rb, ra.transposed());
  return factor_spectrum(core);
}

// Sum of squared entries of B*A, computed as trace((B^T B)(A A^T)); the
// product itself is never formed.
inline double frobenius_stat(const Matrix& b, const Matrix& a) {
  if (b.cols() != a.rows()) {
    raise(ErrorCode::DimensionMismatch, "factor inner dimensions disagree");
  }
  const Matrix gb = gram_cols(b);
  const Matrix ga = gram_rows(a);
  double s = 0.0;
  for (std::size_t i = 0; i < gb.rows(); ++i) {
    for (std::size_t j = 0; j < gb.cols(); ++j) s += gb(i, j) * ga(j, i);
  }
  return s;
}

// One-sided Jacobi SVD on the explicit matrix. Brute-force reference path:
// no rank exploitation, all min(rows, cols) values descending. Kept
// independent of the Gram/QR routes above so the two can check each other.
inline Spectrum jacobi_svd_values(const Matrix& m_in, int max_sweeps = 100) {
  if (!m_in.all_finite()) {
    raise(ErrorCode::NonFiniteInput, "SVD input has non-finite entries");
  }
  if (m_in.rows() == 0 || m_in.cols() == 0) {
    raise(ErrorCode::DimensionMismatch, "SVD input is empty");
  }
  Matrix u = m_in.rows() >= m_in.cols() ? m_in : m_in.transposed();
  // Column-contiguous layout: row j of w is column j of u.
  Matrix w = u.transposed();
  const std::size_t m = u.rows();
  const std::size_t n = u.cols();
  const double tol = 1e-14;
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = w.row(p);
        double* cq = w.row(q);
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          app += cp[i] * cp[i];
          aqq += cq[i] * cq[i];
          apq += cp[i] * cq[i];
        }
        if (std::fabs(apq) <= tol * std::sqrt(app * aqq)) continue;
        converged = false;
        const double tau = (aqq - app) / (2.0 * apq);
        double t = 1.0 / (std::fabs(tau) + std::sqrt(tau * tau + 1.0));
        if (tau < 0.0) t = -t;
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < m; ++i) {
          const double vp = cp[i];
          const double vq = cq[i];
          cp[i] = c * vp - s * vq;
          cq[i] = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) {
    raise(ErrorCode::NoConvergence, "one-sided Jacobi SVD hit the sweep cap");
  }
  Spectrum sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* cj = w.row(j);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += cj[i] * cj[i];
    sigma[j] = std::sqrt(s);
  }
  std::sort(sigma.begin(), sigma.end(), std::greater<double>());
  return sigma;
}

}  // namespace lf
