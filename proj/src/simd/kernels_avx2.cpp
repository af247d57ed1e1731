// AVX2 + FMA variants. This file is compiled with -mavx2 -mfma and must only
// be entered after cpu_has_avx2() returned true.

#include "krt/simd/kernels.hpp"

#include <immintrin.h>

namespace krt::simd {
namespace {

struct F32 {
    using T = float;
    using V = __m256;
    static constexpr std::size_t width = 8;
    static V zero() { return _mm256_setzero_ps(); }
    static V load(const T* p) { return _mm256_loadu_ps(p); }
    static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
    static V set1(T x) { return _mm256_set1_ps(x); }
    static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
    static V add(V a, V b) { return _mm256_add_ps(a, b); }
    static V mul(V a, V b) { return _mm256_mul_ps(a, b); }
    static T hsum(V v) {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        __m128 shuf = _mm_movehdup_ps(lo);
        __m128 sums = _mm_add_ps(lo, shuf);
        shuf = _mm_movehl_ps(shuf, sums);
        sums = _mm_add_ss(sums, shuf);
        return _mm_cvtss_f32(sums);
    }
};

struct F64 {
    using T = double;
    using V = __m256d;
    static constexpr std::size_t width = 4;
    static V zero() { return _mm256_setzero_pd(); }
    static V load(const T* p) { return _mm256_loadu_pd(p); }
    static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
    static V set1(T x) { return _mm256_set1_pd(x); }
    static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
    static V add(V a, V b) { return _mm256_add_pd(a, b); }
    static V mul(V a, V b) { return _mm256_mul_pd(a, b); }
    static T hsum(V v) {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        __m128d high64 = _mm_unpackhi_pd(lo, lo);
        return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
    }
};

// y[0..n) += alpha * x[0..n)
template <class S>
inline void axpy_row(std::size_t n, typename S::T alpha, const typename S::T* x, typename S::T* y) {
    const auto va = S::set1(alpha);
    std::size_t j = 0;
    for (; j + S::width <= n; j += S::width) S::store(y + j, S::fmadd(va, S::load(x + j), S::load(y + j)));
    for (; j < n; ++j) y[j] += alpha * x[j];
}

template <class S>
inline typename S::T dot_row(std::size_t n, const typename S::T* x, const typename S::T* y) {
    auto acc0 = S::zero();
    auto acc1 = S::zero();
    std::size_t i = 0;
    for (; i + 2 * S::width <= n; i += 2 * S::width) {
        acc0 = S::fmadd(S::load(x + i), S::load(y + i), acc0);
        acc1 = S::fmadd(S::load(x + i + S::width), S::load(y + i + S::width), acc1);
    }
    for (; i + S::width <= n; i += S::width) acc0 = S::fmadd(S::load(x + i), S::load(y + i), acc0);
    typename S::T acc = S::hsum(S::add(acc0, acc1));
    for (; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

template <class S>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const typename S::T* a, const typename S::T* b,
             typename S::T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        typename S::T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) axpy_row<S>(n, a[i * k + p], b + p * n, crow);
    }
}

template <class S>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const typename S::T* a, const typename S::T* b,
             typename S::T* c) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot_row<S>(k, a + i * k, b + j * k);
}

template <class S>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const typename S::T* a, const typename S::T* b,
             typename S::T* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const typename S::T* arow = a + p * m;
        const typename S::T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) axpy_row<S>(n, arow[i], brow, c + i * n);
    }
}

template <class S>
typename S::T dot(std::size_t n, const typename S::T* x, const typename S::T* y) {
    return dot_row<S>(n, x, y);
}

template <class S>
void axpy(std::size_t n, typename S::T alpha, const typename S::T* x, typename S::T* y) {
    axpy_row<S>(n, alpha, x, y);
}

template <class S>
void mul(std::size_t n, const typename S::T* x, typename S::T* y) {
    std::size_t i = 0;
    for (; i + S::width <= n; i += S::width) S::store(y + i, S::mul(S::load(x + i), S::load(y + i)));
    for (; i < n; ++i) y[i] *= x[i];
}

template <class S>
typename S::T sum(std::size_t n, const typename S::T* x) {
    auto acc = S::zero();
    std::size_t i = 0;
    for (; i + S::width <= n; i += S::width) acc = S::add(acc, S::load(x + i));
    typename S::T total = S::hsum(acc);
    for (; i < n; ++i) total += x[i];
    return total;
}

template <class S>
KernelTable<typename S::T> make_table() {
    return {Isa::avx2, &gemm_nn<S>, &gemm_nt<S>, &gemm_tn<S>, &dot<S>, &axpy<S>, &mul<S>, &sum<S>};
}

const KernelTable<float> kFloat = make_table<F32>();
const KernelTable<double> kDouble = make_table<F64>();

}  // namespace

const KernelTable<float>* avx2_table_f32() { return &kFloat; }
const KernelTable<double>* avx2_table_f64() { return &kDouble; }

}  // namespace krt::simd
