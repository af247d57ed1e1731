#include "krt/simd/kernels.hpp"

namespace krt::simd {
namespace {

template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] += acc;
        }
    }
}

template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T api = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

template <class T>
T dot(std::size_t n, const T* x, const T* y) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void mul(std::size_t n, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] *= x[i];
}

template <class T>
T sum(std::size_t n, const T* x) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

template <class T>
constexpr KernelTable<T> make_table() {
    return {Isa::scalar, &gemm_nn<T>, &gemm_nt<T>, &gemm_tn<T>, &dot<T>, &axpy<T>, &mul<T>, &sum<T>};
}

constexpr KernelTable<float> kFloat = make_table<float>();
constexpr KernelTable<double> kDouble = make_table<double>();

}  // namespace

template <>
const KernelTable<float>& scalar_kernels<float>() {
    return kFloat;
}

template <>
const KernelTable<double>& scalar_kernels<double>() {
    return kDouble;
}

}  // namespace krt::simd
