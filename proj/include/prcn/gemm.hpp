#pragma once

#include <cblas.h>

#include <cstddef>
#include <string>
#include <type_traits>
#include <vector>

#include "prcn/error.hpp"
#include "prcn/tensor.hpp"

namespace prcn {

template <class T>
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  bool operator==(const Matrix&) const = default;
};

namespace detail {
inline void pin_blas_threads() {
  // One BLAS thread: a fixed reduction order per call shape keeps training
  // runs bit-reproducible.
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}
}  // namespace detail

// C = alpha * op(A) * op(B) + beta * C, row-major. op(A) is M x K, op(B) is K x N.
template <class T>
void gemm_raw(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
              std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
  if (m == 0 || n == 0) return;
  detail::pin_blas_threads();
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  const auto M = static_cast<blasint>(m), N = static_cast<blasint>(n), K = static_cast<blasint>(k);
  if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, ta, tb, M, N, K, alpha, a, static_cast<blasint>(lda), b,
                static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
  } else {
    cblas_sgemm(CblasRowMajor, ta, tb, M, N, K, alpha, a, static_cast<blasint>(lda), b,
                static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
  }
}

template <class T>
Matrix<T> gemm(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows)
    throw ShapeError("gemm: inner dims " + std::to_string(a.cols) + " vs " + std::to_string(b.rows));
  Matrix<T> c(a.rows, b.cols);
  if (a.cols == 0) return c;
  gemm_raw<T>(false, false, a.rows, b.cols, a.cols, T(1), a.data.data(), a.cols, b.data.data(), b.cols, T(0),
              c.data.data(), c.cols);
  return c;
}

// Output spatial extent of a k x k window with the given stride and padding.
inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (k == 0 || stride == 0) throw ShapeError("kernel and stride must be >= 1");
  if (in + 2 * pad < k)
    throw ShapeError("kernel " + std::to_string(k) + " larger than padded input " + std::to_string(in + 2 * pad));
  const std::size_t span = in + 2 * pad - k;
  if (span % stride != 0)
    throw ShapeError("non-integer output size: (" + std::to_string(in) + "+2*" + std::to_string(pad) + "-" +
                     std::to_string(k) + ")/" + std::to_string(stride));
  return span / stride + 1;
}

// Patch matrix for one sample and a contiguous channel range: row index
// (c, ky, kx), column index (oy, ox). Rows are `ld` apart (default oh*ow),
// which lets several samples share one matrix side by side.
template <class T>
void im2col_sample(const BasicTensor<T>& x, std::size_t n, std::size_t c0, std::size_t channels, std::size_t k,
                   std::size_t stride, std::size_t pad, T* col, std::size_t ld = 0) {
  const std::size_t H = x.h(), W = x.w();
  const std::size_t oh = conv_out_dim(H, k, stride, pad), ow = conv_out_dim(W, k, stride, pad);
  if (ld == 0) ld = oh * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = x.plane(n, c0 + c);
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * ld;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            for (std::size_t ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = T(0);
            continue;
          }
          const T* row = src + static_cast<std::size_t>(iy) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[oy * ow + ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : row[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col_sample: scatter-adds the patch matrix back into dx.
template <class T>
void col2im_sample(const T* col, std::size_t n, std::size_t c0, std::size_t channels, std::size_t k,
                   std::size_t stride, std::size_t pad, BasicTensor<T>& dx, std::size_t ld = 0) {
  const std::size_t H = dx.h(), W = dx.w();
  const std::size_t oh = conv_out_dim(H, k, stride, pad), ow = conv_out_dim(W, k, stride, pad);
  if (ld == 0) ld = oh * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = dx.plane(n, c0 + c);
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * ld;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* row = dst + static_cast<std::size_t>(iy) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) row[ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

// Whole-batch patch matrix: rows (c, ky, kx), columns (n, oy, ox).
template <class T>
Matrix<T> im2col(const BasicTensor<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  const std::size_t oh = conv_out_dim(x.h(), k, stride, pad), ow = conv_out_dim(x.w(), k, stride, pad);
  const std::size_t rows = x.c() * k * k, per = oh * ow;
  Matrix<T> m(rows, x.n() * per);
  std::vector<T> col(rows * per);
  for (std::size_t n = 0; n < x.n(); ++n) {
    im2col_sample(x, n, 0, x.c(), k, stride, pad, col.data());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < per; ++j) m(r, n * per + j) = col[r * per + j];
  }
  return m;
}

}  // namespace prcn
