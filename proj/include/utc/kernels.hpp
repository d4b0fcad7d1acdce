#pragma once

#include <cstddef>
#include <type_traits>

#ifdef UTC_USE_BLAS
#include <cblas.h>
#endif

// GEMM kernels over row-major buffers with explicit leading dimensions. All
// accumulate into C. With UTC_USE_BLAS, float and double go through cblas;
// the loops are the fallback.
namespace utc::kernels {

enum class Op { N, T };

namespace detail {

template <class T>
void loop_gemm(Op ta, Op tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
               std::size_t ldb, T* c, std::size_t ldc) {
  auto A = [&](std::size_t i, std::size_t p) { return ta == Op::N ? a[i * lda + p] : a[p * lda + i]; };
  if (tb == Op::N) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = A(i, p);
        if (av == T(0)) continue;
        const T* bp = b + p * ldb;
        T* ci = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    return;
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * ldb;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += A(i, p) * bj[p];
      c[i * ldc + j] += acc;
    }
}

}  // namespace detail

// C(m x n) += op(A) * op(B), op(A) m x k, op(B) k x n
template <class T>
void gemm(Op ta, Op tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc) {
  if (!m || !n || !k) return;
#ifdef UTC_USE_BLAS
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    const auto A = ta == Op::T ? CblasTrans : CblasNoTrans, B = tb == Op::T ? CblasTrans : CblasNoTrans;
    const auto M = static_cast<int>(m), N = static_cast<int>(n), K = static_cast<int>(k);
    const auto la = static_cast<int>(lda), lb = static_cast<int>(ldb), lc = static_cast<int>(ldc);
    if constexpr (std::is_same_v<T, float>) cblas_sgemm(CblasRowMajor, A, B, M, N, K, 1.0f, a, la, b, lb, 1.0f, c, lc);
    else cblas_dgemm(CblasRowMajor, A, B, M, N, K, 1.0, a, la, b, lb, 1.0, c, lc);
    return;
  }
#endif
  detail::loop_gemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc);
}

// C(m x n) += A(m x k) * B(k x n)
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm(Op::N, Op::N, m, n, k, a, k, b, n, c, n);
}

// C(m x n) += A(m x k) * B(n x k)^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm(Op::N, Op::T, m, n, k, a, k, b, k, c, n);
}

// C(m x n) += A(k x m)^T * B(k x n)
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm(Op::T, Op::N, m, n, k, a, m, b, n, c, n);
}

}  // namespace utc::kernels
