#pragma once

// Differentiable ops recorded on a Tape. There is no implicit broadcasting:
// operands of binary elementwise ops must have identical shapes, and the only
// broadcasting forms are the explicit scale/add_scalar/add_rowvec/repeat ops.

#include <vector>

#include "krt/tape.hpp"

namespace krt {

// Probability clamp applied by sigmoid() so downstream logs stay finite.
inline constexpr double kProbEps = 1e-7;

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);  // [m x k] * [k x n]
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b);  // [B x m x k] * [B x k x n]
template <class T>
Var<T> transpose(const Var<T>& a);  // 2-D only
template <class T>
Var<T> reshape(const Var<T>& a, Shape shape);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& a, T factor);
template <class T>
Var<T> add_scalar(const Var<T>& a, T offset);
// a[... x n] + bias[n] added to every length-n row.
template <class T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& bias);
// Stacks `count` copies along a new leading axis: [S...] -> [count, S...].
template <class T>
Var<T> repeat(const Var<T>& a, std::size_t count);

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <class T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t length);

template <class T>
Var<T> gelu(const Var<T>& a);  // exact erf form
// Logistic function clamped to [kProbEps, 1 - kProbEps]; the clamp passes no
// gradient.
template <class T>
Var<T> sigmoid(const Var<T>& a);
template <class T>
Var<T> log(const Var<T>& a);
// Elementwise a^exponent for a > 0.
template <class T>
Var<T> pow(const Var<T>& a, T exponent);

template <class T>
Var<T> sum(const Var<T>& a);  // -> scalar
template <class T>
Var<T> mean(const Var<T>& a);  // -> scalar
// Mean over one axis, removing it.
template <class T>
Var<T> mean_axis(const Var<T>& a, std::size_t axis);

// Softmax over the last axis with per-row max subtraction.
template <class T>
Var<T> softmax_rows(const Var<T>& a);
// Normalizes each last-axis vector to zero mean / unit variance, then applies
// gain and bias. Variance is the biased (1/d) estimate.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));
// Cosine similarity of matching last-axis vectors; the last axis is reduced.
// Throws ValueError on a zero-norm vector.
template <class T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b);

// [B x h x w x c] -> [B*h*w x 9c]: each row holds the zero-padded 3x3
// neighbourhood of one cell, ordered (dy, dx, channel).
template <class T>
Var<T> im2col3x3(const Var<T>& x);

}  // namespace krt
