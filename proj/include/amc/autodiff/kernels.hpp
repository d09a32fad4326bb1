#pragma once

// Raw dense kernels behind the tape ops. Everything here works on
// contiguous row-major buffers and performs no shape validation; the
// callers in tape.hpp check shapes first. Matrix products go to BLAS.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace amc::kernels {

// C[m,n] = op(A) * op(B) + beta * C, row-major; op transposes when asked.
// A is [m,k] (or [k,m] when ta), B is [k,n] (or [n,k] when tb).
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, double beta = 0.0) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] *= beta;
    return;
  }
  const auto lda = static_cast<blasint>(ta ? m : k);
  const auto ldb = static_cast<blasint>(tb ? k : n);
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<blasint>(m), static_cast<blasint>(n), static_cast<blasint>(k), 1.0, a,
              lda, b, ldb, beta, c, static_cast<blasint>(n));
}

// Convolutions below are stride-1 "same" cross-correlations,
//   y[b,o,l] = sum_{c,k} w[o,c,k] * x[b,c,l+k-pad],  pad = (K-1)/2,
// lowered to GEMM through an im2col buffer col[(c,k), l] = x[b,c,l+k-pad].

inline void im2col(const double* x, double* col, std::size_t cin, std::size_t len,
                   std::size_t kernel) {
  const long pad = static_cast<long>((kernel - 1) / 2);
  const long L = static_cast<long>(len);
  for (std::size_t c = 0; c < cin; ++c) {
    const double* xrow = x + c * len;
    for (std::size_t k = 0; k < kernel; ++k) {
      double* crow = col + (c * kernel + k) * len;
      const long s = static_cast<long>(k) - pad;
      for (long l = 0; l < L; ++l) {
        const long src = l + s;
        crow[l] = (src >= 0 && src < L) ? xrow[src] : 0.0;
      }
    }
  }
}

// Scatter-add inverse of im2col.
inline void col2im(const double* col, double* x, std::size_t cin, std::size_t len,
                   std::size_t kernel) {
  const long pad = static_cast<long>((kernel - 1) / 2);
  const long L = static_cast<long>(len);
  for (std::size_t c = 0; c < cin; ++c) {
    double* xrow = x + c * len;
    for (std::size_t k = 0; k < kernel; ++k) {
      const double* crow = col + (c * kernel + k) * len;
      const long s = static_cast<long>(k) - pad;
      const long lo = std::max(0L, -s);
      const long hi = std::min(L, L - s);
      for (long l = lo; l < hi; ++l) xrow[l + s] += crow[l];
    }
  }
}

inline void conv1d(std::span<const double> x, std::span<const double> w,
                   std::span<double> y, std::size_t batch, std::size_t cin,
                   std::size_t cout, std::size_t len, std::size_t kernel) {
  std::vector<double> col(cin * kernel * len);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data() + b * cin * len, col.data(), cin, len, kernel);
    gemm(false, false, cout, len, cin * kernel, w.data(), col.data(),
         y.data() + b * cout * len);
  }
}

// Adjoint of conv1d with respect to its input:
//   z[b,c,m] = sum_{o,k} w[o,c,k] * g[b,o,m-k+pad]
inline void conv1d_input_grad(std::span<const double> g, std::span<const double> w,
                              std::span<double> z, std::size_t batch,
                              std::size_t cin, std::size_t cout, std::size_t len,
                              std::size_t kernel) {
  std::fill(z.begin(), z.end(), 0.0);
  std::vector<double> col(cin * kernel * len);
  for (std::size_t b = 0; b < batch; ++b) {
    gemm(true, false, cin * kernel, len, cout, w.data(), g.data() + b * cout * len,
         col.data());
    col2im(col.data(), z.data() + b * cin * len, cin, len, kernel);
  }
}

// Adjoint of conv1d with respect to its kernel:
//   dw[o,c,k] = sum_{b,l} g[b,o,l] * x[b,c,l+k-pad]
inline void conv1d_weight_grad(std::span<const double> x, std::span<const double> g,
                               std::span<double> dw, std::size_t batch,
                               std::size_t cin, std::size_t cout, std::size_t len,
                               std::size_t kernel) {
  std::fill(dw.begin(), dw.end(), 0.0);
  std::vector<double> col(cin * kernel * len);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(x.data() + b * cin * len, col.data(), cin, len, kernel);
    gemm(false, true, cout, cin * kernel, len, g.data() + b * cout * len, col.data(),
         dw.data(), 1.0);
  }
}

// Row-wise log-sum-exp for a [rows, cols] buffer.
inline double logsumexp(const double* row, std::size_t cols) {
  double m = row[0];
  for (std::size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - m);
  return m + std::log(s);
}

}  // namespace amc::kernels
