#include "krt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "krt/simd/kernels.hpp"

namespace krt {
namespace {

template <class T>
const simd::KernelTable<T>& kern() {
    return simd::active_kernels<T>();
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

template <class T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
    if (a.value().rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(a.shape()));
}

// Adds src into the gradient of v when v needs one.
template <class T>
void accumulate(Tape<T>& tape, const Var<T>& v, const Tensor<T>& src) {
    if (!tape.needs_grad(v)) return;
    auto& g = tape.grad_of(v);
    kern<T>().axpy(g.size(), T(1), src.data().data(), g.data().data());
}

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df, const char* name) {
    const auto& x = a.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    Tape<T>& tape = *a.tape();
    return tape.record(
        std::move(out), {a},
        [a, df](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            const auto& xv = a.value();
            auto& ga = t.grad_of(a);
            for (std::size_t i = 0; i < xv.size(); ++i) ga[i] += g[i] * df(xv[i]);
        },
        name);
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    Tensor<T> out({m, n});
    kern<T>().gemm_nn(m, n, k, a.value().data().data(), b.value().data().data(), out.data().data());
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b, m, k, n](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            const auto& kt = kern<T>();
            if (t.needs_grad(a))
                kt.gemm_nt(m, k, n, g.data().data(), b.value().data().data(), t.grad_of(a).data().data());
            if (t.needs_grad(b))
                kt.gemm_tn(k, n, m, a.value().data().data(), g.data().data(), t.grad_of(b).data().data());
        },
        "matmul");
}

template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k)
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    Tensor<T> out({batch, m, n});
    const auto& kt = kern<T>();
    for (std::size_t i = 0; i < batch; ++i)
        kt.gemm_nn(m, n, k, a.value().data().data() + i * m * k, b.value().data().data() + i * k * n,
                   out.data().data() + i * m * n);
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b, batch, m, k, n](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            const auto& kt = kern<T>();
            const bool ga = t.needs_grad(a), gb = t.needs_grad(b);
            for (std::size_t i = 0; i < batch; ++i) {
                const T* gi = g.data().data() + i * m * n;
                if (ga)
                    kt.gemm_nt(m, k, n, gi, b.value().data().data() + i * k * n,
                               t.grad_of(a).data().data() + i * m * k);
                if (gb)
                    kt.gemm_tn(k, n, m, a.value().data().data() + i * m * k, gi,
                               t.grad_of(b).data().data() + i * k * n);
            }
        },
        "bmm");
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({c, r});
    const auto& x = a.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return a.tape()->record(
        std::move(out), {a},
        [a, r, c](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        },
        "transpose");
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return a.tape()->record(
        std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) { accumulate(t, a, g); }, "reshape");
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    kern<T>().axpy(out.size(), T(1), b.value().data().data(), out.data().data());
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            accumulate(t, a, g);
            accumulate(t, b, g);
        },
        "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = a.value();
    kern<T>().axpy(out.size(), T(-1), b.value().data().data(), out.data().data());
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            accumulate(t, a, g);
            if (t.needs_grad(b)) {
                auto& gb = t.grad_of(b);
                kern<T>().axpy(gb.size(), T(-1), g.data().data(), gb.data().data());
            }
        },
        "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = a.value();
    kern<T>().mul(out.size(), b.value().data().data(), out.data().data());
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            if (t.needs_grad(a)) {
                Tensor<T> tmp = g;
                kern<T>().mul(tmp.size(), b.value().data().data(), tmp.data().data());
                accumulate(t, a, tmp);
            }
            if (t.needs_grad(b)) {
                Tensor<T> tmp = g;
                kern<T>().mul(tmp.size(), a.value().data().data(), tmp.data().data());
                accumulate(t, b, tmp);
            }
        },
        "mul");
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out = a.value();
    for (auto& x : out.data()) x *= factor;
    return a.tape()->record(
        std::move(out), {a},
        [a, factor](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            kern<T>().axpy(ga.size(), factor, g.data().data(), ga.data().data());
        },
        "scale");
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T offset) {
    Tensor<T> out = a.value();
    for (auto& x : out.data()) x += offset;
    return a.tape()->record(
        std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) { accumulate(t, a, g); }, "add_scalar");
}

template <class T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& bias) {
    if (a.value().rank() == 0) throw DimensionError("add_rowvec: operand is a scalar");
    const std::size_t n = a.shape().back();
    if (bias.value().rank() != 1 || bias.dim(0) != n)
        throw DimensionError("add_rowvec: bias shape " + shape_str(bias.shape()) + " does not match rows of " +
                             shape_str(a.shape()));
    const std::size_t rows = a.size() / n;
    Tensor<T> out = a.value();
    const auto& kt = kern<T>();
    for (std::size_t r = 0; r < rows; ++r) kt.axpy(n, T(1), bias.value().data().data(), out.data().data() + r * n);
    return a.tape()->record(
        std::move(out), {a, bias},
        [a, bias, rows, n](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            accumulate(t, a, g);
            if (t.needs_grad(bias)) {
                auto& gb = t.grad_of(bias);
                for (std::size_t r = 0; r < rows; ++r)
                    kern<T>().axpy(n, T(1), g.data().data() + r * n, gb.data().data());
            }
        },
        "add_rowvec");
}

template <class T>
Var<T> repeat(const Var<T>& a, std::size_t count) {
    if (count == 0) throw ValueError("repeat: count must be positive");
    Shape shape{count};
    shape.insert(shape.end(), a.shape().begin(), a.shape().end());
    const std::size_t n = a.size();
    Tensor<T> out(shape);
    for (std::size_t r = 0; r < count; ++r) std::copy_n(a.value().data().data(), n, out.data().data() + r * n);
    return a.tape()->record(
        std::move(out), {a},
        [a, count, n](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            for (std::size_t r = 0; r < count; ++r)
                kern<T>().axpy(n, T(1), g.data().data() + r * n, ga.data().data());
        },
        "repeat");
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ValueError("concat: no operands");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    Shape shape = first;
    shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            if (i != axis && s[i] != first[i]) ok = false;
        if (!ok) throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
        shape[axis] += s[axis];
    }
    const AxisSplit total = split_axis(shape, axis);
    Tensor<T> out(shape);
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t chunk = p.dim(axis) * total.inner;
        const T* src = p.value().data().data();
        for (std::size_t o = 0; o < total.outer; ++o)
            std::copy_n(src + o * chunk, chunk, out.data().data() + o * total.extent * total.inner + offset);
        offset += chunk;
    }
    Tape<T>& tape = *parts.front().tape();
    return tape.record(
        std::move(out), parts,
        [parts, offsets, axis, total](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            for (std::size_t i = 0; i < parts.size(); ++i) {
                const auto& p = parts[i];
                if (!t.needs_grad(p)) continue;
                auto& gp = t.grad_of(p);
                const std::size_t chunk = p.dim(axis) * total.inner;
                for (std::size_t o = 0; o < total.outer; ++o)
                    kern<T>().axpy(chunk, T(1), g.data().data() + o * total.extent * total.inner + offsets[i],
                                   gp.data().data() + o * chunk);
            }
        },
        "concat");
}

template <class T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& in = a.shape();
    if (axis >= in.size()) throw DimensionError("slice: axis out of range for " + shape_str(in));
    if (start + length > in[axis] || length == 0)
        throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(in));
    const AxisSplit s = split_axis(in, axis);
    Shape shape = in;
    shape[axis] = length;
    Tensor<T> out(shape);
    const std::size_t chunk = length * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(a.value().data().data() + o * s.extent * s.inner + start * s.inner, chunk,
                    out.data().data() + o * chunk);
    return a.tape()->record(
        std::move(out), {a},
        [a, s, start, chunk](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            for (std::size_t o = 0; o < s.outer; ++o)
                kern<T>().axpy(chunk, T(1), g.data().data() + o * chunk,
                               ga.data().data() + o * s.extent * s.inner + start * s.inner);
        },
        "slice");
}

template <class T>
Var<T> gelu(const Var<T>& a) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    return unary(
        a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [](T x) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x); },
        "gelu");
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
    const T eps = static_cast<T>(kProbEps);
    const auto& x = a.value();
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        const T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        out[i] = std::clamp(s, eps, T(1) - eps);
    }
    return a.tape()->record(
        std::move(out), {a},
        [a, eps](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            const auto& x = a.value();
            for (std::size_t i = 0; i < x.size(); ++i) {
                const T v = x[i];
                const T s = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
                if (s <= eps || s >= T(1) - eps) continue;
                ga[i] += g[i] * s * (T(1) - s);
            }
        },
        "sigmoid");
}

template <class T>
Var<T> log(const Var<T>& a) {
    for (auto v : a.value().data())
        if (!(v > 0)) throw ValueError("log: non-positive input " + std::to_string(v));
    return unary(a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; }, "log");
}

template <class T>
Var<T> pow(const Var<T>& a, T exponent) {
    for (auto v : a.value().data())
        if (!(v > 0)) throw ValueError("pow: non-positive base " + std::to_string(v));
    return unary(
        a, [exponent](T x) { return std::pow(x, exponent); },
        [exponent](T x) { return exponent == T(0) ? T(0) : exponent * std::pow(x, exponent - T(1)); }, "pow");
}

template <class T>
Var<T> sum(const Var<T>& a) {
    const T total = kern<T>().sum(a.size(), a.value().data().data());
    return a.tape()->record(
        Tensor<T>::scalar(total), {a},
        [a](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            for (auto& v : ga.data()) v += g[0];
        },
        "sum");
}

template <class T>
Var<T> mean(const Var<T>& a) {
    if (a.size() == 0) throw DimensionError("mean of an empty tensor");
    const T n = static_cast<T>(a.size());
    const T total = kern<T>().sum(a.size(), a.value().data().data());
    return a.tape()->record(
        Tensor<T>::scalar(total / n), {a},
        [a, n](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            const T share = g[0] / n;
            for (auto& v : ga.data()) v += share;
        },
        "mean");
}

template <class T>
Var<T> mean_axis(const Var<T>& a, std::size_t axis) {
    const Shape& in = a.shape();
    if (axis >= in.size()) throw DimensionError("mean_axis: axis out of range for " + shape_str(in));
    if (in[axis] == 0) throw DimensionError("mean_axis: empty axis");
    const AxisSplit s = split_axis(in, axis);
    Shape shape = in;
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(shape);
    const T inv = T(1) / static_cast<T>(s.extent);
    const auto& kt = kern<T>();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            kt.axpy(s.inner, inv, a.value().data().data() + (o * s.extent + e) * s.inner,
                    out.data().data() + o * s.inner);
    return a.tape()->record(
        std::move(out), {a},
        [a, s, inv](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t e = 0; e < s.extent; ++e)
                    kern<T>().axpy(s.inner, inv, g.data().data() + o * s.inner,
                                   ga.data().data() + (o * s.extent + e) * s.inner);
        },
        "mean_axis");
}

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
    if (a.value().rank() == 0) throw DimensionError("softmax_rows on a scalar");
    const std::size_t n = a.shape().back();
    const std::size_t rows = n == 0 ? 0 : a.size() / n;
    Tensor<T> out(a.shape());
    const auto& x = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * n;
        T* yr = out.data().data() + r * n;
        const T mx = *std::max_element(xr, xr + n);
        T total = 0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            total += yr[j];
        }
        for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
    }
    return a.tape()->record(
        std::move(out), {a},
        [a, rows, n](Tape<T>& t, const Tensor<T>& y, const Tensor<T>& g) {
            auto& ga = t.grad_of(a);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yr = y.data().data() + r * n;
                const T* gr = g.data().data() + r * n;
                const T inner = kern<T>().dot(n, yr, gr);
                T* out = ga.data().data() + r * n;
                for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - inner);
            }
        },
        "softmax_rows");
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    if (!(eps > 0)) throw ValueError("layer_norm: eps must be positive");
    if (x.value().rank() == 0) throw DimensionError("layer_norm on a scalar");
    const std::size_t d = x.shape().back();
    if (gain.value().rank() != 1 || gain.dim(0) != d || bias.value().rank() != 1 || bias.dim(0) != d)
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " do not match last dim of " + shape_str(x.shape()));
    const std::size_t rows = x.size() / d;
    Tensor<T> xhat(x.shape());
    std::vector<T> inv_std(rows);
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data().data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (xr[j] - mu) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return x.tape()->record(
        std::move(out), {x, gain, bias},
        [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](
            Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            const auto& gv = gain.value();
            if (t.needs_grad(x)) {
                auto& gx = t.grad_of(x);
                std::vector<T> gh(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_gh = 0, mean_ghx = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        gh[j] = g[r * d + j] * gv[j];
                        mean_gh += gh[j];
                        mean_ghx += gh[j] * xhat[r * d + j];
                    }
                    mean_gh /= static_cast<T>(d);
                    mean_ghx /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] += inv_std[r] * (gh[j] - mean_gh - xhat[r * d + j] * mean_ghx);
                }
            }
            if (t.needs_grad(gain)) {
                auto& gg = t.grad_of(gain);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (t.needs_grad(bias)) {
                auto& gb = t.grad_of(bias);
                for (std::size_t r = 0; r < rows; ++r)
                    kern<T>().axpy(d, T(1), g.data().data() + r * d, gb.data().data());
            }
        },
        "layer_norm");
}

template <class T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "cosine_similarity");
    if (a.value().rank() == 0) throw DimensionError("cosine_similarity on scalars");
    const std::size_t n = a.shape().back();
    const std::size_t rows = n == 0 ? 0 : a.size() / n;
    Shape shape(a.shape().begin(), a.shape().end() - 1);
    Tensor<T> out(shape);
    std::vector<T> na(rows), nb(rows);
    const auto& kt = kern<T>();
    const T* av = a.value().data().data();
    const T* bv = b.value().data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        na[r] = std::sqrt(kt.dot(n, av + r * n, av + r * n));
        nb[r] = std::sqrt(kt.dot(n, bv + r * n, bv + r * n));
        if (!(na[r] > 0) || !(nb[r] > 0)) throw ValueError("cosine_similarity: zero-norm vector");
        out[r] = kt.dot(n, av + r * n, bv + r * n) / (na[r] * nb[r]);
    }
    return a.tape()->record(
        std::move(out), {a, b},
        [a, b, na = std::move(na), nb = std::move(nb), rows, n](Tape<T>& t, const Tensor<T>& cos,
                                                                const Tensor<T>& g) {
            const T* av = a.value().data().data();
            const T* bv = b.value().data().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T denom = na[r] * nb[r];
                if (t.needs_grad(a)) {
                    T* ga = t.grad_of(a).data().data() + r * n;
                    const T ca = cos[r] / (na[r] * na[r]);
                    for (std::size_t j = 0; j < n; ++j) ga[j] += g[r] * (bv[r * n + j] / denom - ca * av[r * n + j]);
                }
                if (t.needs_grad(b)) {
                    T* gb = t.grad_of(b).data().data() + r * n;
                    const T cb = cos[r] / (nb[r] * nb[r]);
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[r] * (av[r * n + j] / denom - cb * bv[r * n + j]);
                }
            }
        },
        "cosine_similarity");
}

template <class T>
Var<T> im2col3x3(const Var<T>& x) {
    require_rank(x, 4, "im2col3x3");
    const std::size_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t cols = 9 * c;
    Tensor<T> out({batch * h * w, cols});
    const T* xv = x.value().data().data();
    // Visits (row, column block, source offset) for every in-bounds neighbour.
    auto for_each_tap = [=](auto&& fn) {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const std::size_t row = (b * h + y) * w + xx;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
                            const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
                            if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) ||
                                sx >= static_cast<std::ptrdiff_t>(w))
                                continue;
                            const std::size_t block = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
                            const std::size_t src = ((b * h + static_cast<std::size_t>(sy)) * w +
                                                     static_cast<std::size_t>(sx)) * c;
                            fn(row * cols + block * c, src);
                        }
                }
    };
    T* ov = out.data().data();
    for_each_tap([&](std::size_t dst, std::size_t src) { std::copy_n(xv + src, c, ov + dst); });
    return x.tape()->record(
        std::move(out), {x},
        [x, for_each_tap, c](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            T* gx = t.grad_of(x).data().data();
            const T* gv = g.data().data();
            for_each_tap([&](std::size_t dst, std::size_t src) {
                for (std::size_t ch = 0; ch < c; ++ch) gx[src + ch] += gv[dst + ch];
            });
        },
        "im2col3x3");
}

#define KRT_INSTANTIATE_OPS(T)                                                              \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                   \
    template Var<T> bmm(const Var<T>&, const Var<T>&);                                      \
    template Var<T> transpose(const Var<T>&);                                               \
    template Var<T> reshape(const Var<T>&, Shape);                                          \
    template Var<T> add(const Var<T>&, const Var<T>&);                                      \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
    template Var<T> scale(const Var<T>&, T);                                                \
    template Var<T> add_scalar(const Var<T>&, T);                                           \
    template Var<T> add_rowvec(const Var<T>&, const Var<T>&);                               \
    template Var<T> repeat(const Var<T>&, std::size_t);                                     \
    template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                        \
    template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);            \
    template Var<T> gelu(const Var<T>&);                                                    \
    template Var<T> sigmoid(const Var<T>&);                                                 \
    template Var<T> log(const Var<T>&);                                                     \
    template Var<T> pow(const Var<T>&, T);                                                  \
    template Var<T> sum(const Var<T>&);                                                     \
    template Var<T> mean(const Var<T>&);                                                    \
    template Var<T> mean_axis(const Var<T>&, std::size_t);                                  \
    template Var<T> softmax_rows(const Var<T>&);                                            \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);             \
    template Var<T> cosine_similarity(const Var<T>&, const Var<T>&);                        \
    template Var<T> im2col3x3(const Var<T>&);

KRT_INSTANTIATE_OPS(float)
KRT_INSTANTIATE_OPS(double)

#undef KRT_INSTANTIATE_OPS

}  // namespace krt
