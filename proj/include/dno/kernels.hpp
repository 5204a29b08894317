#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

// Dense row-major matrix kernels used by the tensor engine.
//
// Every output element is accumulated in a fixed order: ascending over the
// reduction index, one fused multiply-add per term, starting from zero. The
// vector path and the scalar tail perform the same sequence of roundings, so a
// row of a batched product is bit-identical to the same row computed alone.
// The A*B^T product reduces over contiguous memory instead and uses the fixed
// lane order of lane_dot; it carries the same row independence.

namespace dno::kernels {

namespace detail {

// C[i,j] = sum_p A(i,p) * B[p,j], where A(i,p) = a[i*rs + p*ps].
template <class T>
void scalar_block(const T* a, std::size_t rs, std::size_t ps, const T* b, T* c, std::size_t i0,
                  std::size_t i1, std::size_t j0, std::size_t j1, std::size_t k, std::size_t m) {
  for (std::size_t i = i0; i < i1; ++i) {
    for (std::size_t j = j0; j < j1; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * rs + p * ps], b[p * m + j], acc);
      c[i * m + j] = acc;
    }
  }
}

// C[i,j] = sum_p A[i,p] * B[j,p] with lane l accumulating the terms p = 8q + l
// in ascending q, the lanes summed in a fixed tree, then the k % 8 tail terms
// appended by fused multiply-add.
template <class T>
T lane_dot(const T* a, const T* b, std::size_t k) {
  T lanes[8] = {};
  const std::size_t kv = k - k % 8;
  for (std::size_t p = 0; p < kv; p += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] = std::fma(a[p + l], b[p + l], lanes[l]);
  T v = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6])) + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
  for (std::size_t p = kv; p < k; ++p) v = std::fma(a[p], b[p], v);
  return v;
}

template <class T>
void dot_product(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) c[i * m + j] = lane_dot(a + i * k, b + j * k, k);
}

#if defined(__AVX512F__)
inline constexpr std::size_t kRows = 8;

// R rows by 8*Q columns over reduction indices [p0, p1). Accumulators resume
// from C when p0 > 0, which leaves the ascending order intact.
template <std::size_t R, std::size_t Q>
void avx512_block(const double* a, std::size_t rs, std::size_t ps, const double* b, double* c,
                  std::size_t i0, std::size_t j0, std::size_t p0, std::size_t p1, std::size_t m) {
  __m512d acc[R][Q];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < Q; ++q)
      acc[r][q] = p0 == 0 ? _mm512_setzero_pd() : _mm512_loadu_pd(c + (i0 + r) * m + j0 + 8 * q);
  for (std::size_t p = p0; p < p1; ++p) {
    const double* brow = b + p * m + j0;
    __m512d bv[Q];
    for (std::size_t q = 0; q < Q; ++q) bv[q] = _mm512_loadu_pd(brow + 8 * q);
    for (std::size_t r = 0; r < R; ++r) {
      const __m512d av = _mm512_set1_pd(a[(i0 + r) * rs + p * ps]);
      for (std::size_t q = 0; q < Q; ++q) acc[r][q] = _mm512_fmadd_pd(av, bv[q], acc[r][q]);
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < Q; ++q) _mm512_storeu_pd(c + (i0 + r) * m + j0 + 8 * q, acc[r][q]);
}

template <std::size_t Q, std::size_t... R>
void avx512_rows(std::size_t rows, std::index_sequence<R...>, const double* a, std::size_t rs, std::size_t ps,
                 const double* b, double* c, std::size_t i0, std::size_t j0, std::size_t p0, std::size_t p1,
                 std::size_t m) {
  ((rows == R + 1 ? avx512_block<R + 1, Q>(a, rs, ps, b, c, i0, j0, p0, p1, m) : void()), ...);
}

// B is consumed in panels of kPanel rows so a panel stays resident in L2
// while every column strip passes over it.
inline void strided_product(const double* a, std::size_t rs, std::size_t ps, const double* b,
                            double* c, std::size_t n, std::size_t k, std::size_t m) {
  constexpr std::size_t kCols = 16, kPanel = 64;
  const std::size_t mv = m - m % kCols;
  const std::size_t m8 = m - m % 8;
  for (std::size_t p0 = 0; p0 < k; p0 += kPanel) {
    const std::size_t p1 = std::min(k, p0 + kPanel);
    for (std::size_t j0 = 0; j0 < m8; j0 += j0 < mv ? kCols : 8) {
      for (std::size_t i0 = 0; i0 < n; i0 += kRows) {
        const std::size_t rows = std::min(kRows, n - i0);
        if (j0 < mv)
          avx512_rows<2>(rows, std::make_index_sequence<kRows>{}, a, rs, ps, b, c, i0, j0, p0, p1, m);
        else
          avx512_rows<1>(rows, std::make_index_sequence<kRows>{}, a, rs, ps, b, c, i0, j0, p0, p1, m);
      }
    }
  }
  if (m8 < m) scalar_block(a, rs, ps, b, c, 0, n, m8, m, k, m);
}

// RI rows of A against RJ rows of B; same arithmetic as lane_dot.
template <std::size_t RI, std::size_t RJ>
void avx512_dot_block(const double* a, const double* b, double* c, std::size_t i0, std::size_t j0, std::size_t k,
                      std::size_t m) {
  __m512d acc[RI][RJ];
  for (std::size_t r = 0; r < RI; ++r)
    for (std::size_t s = 0; s < RJ; ++s) acc[r][s] = _mm512_setzero_pd();
  const std::size_t kv = k - k % 8;
  for (std::size_t p = 0; p < kv; p += 8) {
    __m512d bv[RJ];
    for (std::size_t s = 0; s < RJ; ++s) bv[s] = _mm512_loadu_pd(b + (j0 + s) * k + p);
    for (std::size_t r = 0; r < RI; ++r) {
      const __m512d av = _mm512_loadu_pd(a + (i0 + r) * k + p);
      for (std::size_t s = 0; s < RJ; ++s) acc[r][s] = _mm512_fmadd_pd(av, bv[s], acc[r][s]);
    }
  }
  alignas(64) double l[8];
  for (std::size_t r = 0; r < RI; ++r)
    for (std::size_t s = 0; s < RJ; ++s) {
      _mm512_store_pd(l, acc[r][s]);
      double v = ((l[0] + l[4]) + (l[2] + l[6])) + ((l[1] + l[5]) + (l[3] + l[7]));
      for (std::size_t p = kv; p < k; ++p) v = std::fma(a[(i0 + r) * k + p], b[(j0 + s) * k + p], v);
      c[(i0 + r) * m + j0 + s] = v;
    }
}

template <std::size_t RJ, std::size_t... R>
void avx512_dot_rows(std::size_t rows, std::index_sequence<R...>, const double* a, const double* b, double* c,
                     std::size_t i0, std::size_t j0, std::size_t k, std::size_t m) {
  ((rows == R + 1 ? avx512_dot_block<R + 1, RJ>(a, b, c, i0, j0, k, m) : void()), ...);
}

inline void dot_product(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t j0 = 0; j0 < m; j0 += 2) {
    for (std::size_t i0 = 0; i0 < n; i0 += kRows) {
      const std::size_t rows = std::min(kRows, n - i0);
      if (j0 + 2 <= m)
        avx512_dot_rows<2>(rows, std::make_index_sequence<kRows>{}, a, b, c, i0, j0, k, m);
      else
        avx512_dot_rows<1>(rows, std::make_index_sequence<kRows>{}, a, b, c, i0, j0, k, m);
    }
  }
}
#endif

template <class T>
void strided_product(const T* a, std::size_t rs, std::size_t ps, const T* b, T* c, std::size_t n,
                     std::size_t k, std::size_t m) {
  scalar_block(a, rs, ps, b, c, 0, n, 0, m, k, m);
}

}  // namespace detail

/// C[n,m] = A[n,k] * B[k,m]
template <class T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  if (k == 0) {
    std::fill_n(c, n * m, T(0));
    return;
  }
  detail::strided_product(a, k, 1, b, c, n, k, m);
}

/// C[n,m] = A[n,k] * B[m,k]^T
template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  detail::dot_product(a, b, c, n, k, m);
}

/// C[k,m] = A[n,k]^T * B[n,m]
template <class T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  if (n == 0) {
    std::fill_n(c, k * m, T(0));
    return;
  }
  detail::strided_product(a, 1, k, b, c, k, n, m);
}

}  // namespace dno::kernels
