#pragma once

#include <functional>
#include <span>

#include "atelier/tensor.hpp"

namespace atelier {

// Matrix product of a[m x k] and b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x[n x in] * weight[out x in]^T (+ bias[out]). The weight layout matches
// the usual dense-layer convention (one row per output unit).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

enum class Elementwise { add, mul, gelu, sigmoid, scale };

// Binary kinds need equal shapes. gelu and sigmoid ignore the second operand.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b);
// Scalar right-hand side: add and mul/scale are supported.
Tensor elementwise(Elementwise kind, const Tensor& a, double b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);

// tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluCoeff = 0.044715;
inline constexpr double kSqrt2OverPi = 0.7978845608028654;
Tensor gelu(const Tensor& a);
double gelu_value(double x);

// Per-row normalization over the last dimension using the population
// variance, then gamma * x_hat + beta.
inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);

// Row-wise softmax over the last dimension.
Tensor softmax(const Tensor& x);

// Mean over non-ignored rows of -log softmax(logits)[target]. Throws
// NumericalError when every row is ignored.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index);

// Fused causal multi-head self-attention. qkv is [n x 3d] holding the query,
// key and value projections side by side; the result is [n x d] with heads
// concatenated. Position i attends to positions 0..i only.
Tensor causal_self_attention(const Tensor& qkv, std::size_t n_heads);

// Row gather: out[i] = table[ids[i]].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Stacks a[m x d] on top of b[n x d].
Tensor concat_rows(const Tensor& a, const Tensor& b);

// Row i of x as a [1 x d] tensor.
Tensor select_row(const Tensor& x, std::size_t row);

// Sum of all elements, as a scalar.
Tensor sum(const Tensor& x);

// Max over components of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// where numeric is the central difference (f(x+h) - f(x-h)) / 2h.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = 1e-5);

}  // namespace atelier
