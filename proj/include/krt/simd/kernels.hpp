#pragma once

// Inner-loop kernels behind the tensor engine. Every kernel has a scalar
// reference implementation; wider variants are compiled in separate
// translation units and picked once at startup from the CPU feature set.
//
// All matrices are dense row-major. The gemm kernels accumulate into C.

#include <cstddef>
#include <string_view>

namespace krt::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

template <class T>
struct KernelTable {
    Isa isa;
    // C[m x n] += A[m x k] * B[k x n]
    void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
    // C[m x n] += A[m x k] * B[n x k]^T
    void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
    // C[m x n] += A[k x m]^T * B[k x n]
    void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
    T (*dot)(std::size_t n, const T* x, const T* y);
    // y += alpha * x
    void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
    // y = x * y elementwise
    void (*mul)(std::size_t n, const T* x, T* y);
    T (*sum)(std::size_t n, const T* x);
};

template <class T>
const KernelTable<T>& scalar_kernels();

// nullptr when the variant was not built or the CPU lacks the feature.
template <class T>
const KernelTable<T>* avx2_kernels();

// The table used by the tensor engine. Resolved once: AVX2 when available,
// unless the environment variable KRT_SIMD=scalar forces the reference path.
template <class T>
const KernelTable<T>& active_kernels();

bool cpu_has_avx2();

}  // namespace krt::simd
