#include "krt/simd/kernels.hpp"

#include <cstdlib>
#include <string>

namespace krt::simd {

#ifdef KRT_HAVE_AVX2
const KernelTable<float>* avx2_table_f32();
const KernelTable<double>* avx2_table_f64();
#endif

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar: return "scalar";
        case Isa::avx2: return "avx2";
    }
    return "unknown";
}

bool cpu_has_avx2() {
#if defined(KRT_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    static const bool has = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return has;
#else
    return false;
#endif
}

template <>
const KernelTable<float>* avx2_kernels<float>() {
#ifdef KRT_HAVE_AVX2
    if (cpu_has_avx2()) return avx2_table_f32();
#endif
    return nullptr;
}

template <>
const KernelTable<double>* avx2_kernels<double>() {
#ifdef KRT_HAVE_AVX2
    if (cpu_has_avx2()) return avx2_table_f64();
#endif
    return nullptr;
}

namespace {

bool scalar_forced() {
    const char* env = std::getenv("KRT_SIMD");
    return env != nullptr && std::string(env) == "scalar";
}

template <class T>
const KernelTable<T>& resolve() {
    if (!scalar_forced()) {
        if (const auto* wide = avx2_kernels<T>()) return *wide;
    }
    return scalar_kernels<T>();
}

}  // namespace

template <>
const KernelTable<float>& active_kernels<float>() {
    static const KernelTable<float>& table = resolve<float>();
    return table;
}

template <>
const KernelTable<double>& active_kernels<double>() {
    static const KernelTable<double>& table = resolve<double>();
    return table;
}

}  // namespace krt::simd
