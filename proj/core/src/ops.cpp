#include "atelier/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "atelier/errors.hpp"

namespace atelier {

namespace {

using detail::Node;
using detail::TensorImpl;
using Backward = std::function<void(const TensorImpl&)>;

Tensor make_output(Shape shape, std::vector<double> data, const char* op, std::initializer_list<Tensor> inputs,
                   Backward rule) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool track = false;
  for (const auto& in : inputs) track = track || (in.defined() && in.requires_grad());
  if (!track) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  for (const auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl_ptr());
  }
  node->backward = std::move(rule);
  out.impl().requires_grad = true;
  out.impl().grad_fn = std::move(node);
  return out;
}

void require_matrix(const Tensor& t, const char* what) {
  if (!t.defined() || t.ndim() != 2) {
    throw DimensionError(std::string(what) + " must be a 2-D tensor, got " +
                         (t.defined() ? shape_string(t.shape()) : std::string("<undefined>")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

typedef double v4d __attribute__((vector_size(32)));
typedef double v8d __attribute__((vector_size(64)));

template <std::size_t W>
struct Lanes;
template <>
struct Lanes<4> {
  using type = v4d;
};
template <>
struct Lanes<8> {
  using type = v8d;
};

template <std::size_t W>
inline typename Lanes<W>::type load(const double* p) {
  typename Lanes<W>::type v;
  static_assert(sizeof v == W * sizeof(double));
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <std::size_t W>
inline void store(double* p, typename Lanes<W>::type v) {
  std::memcpy(p, &v, sizeof v);
}

// 4 rows x 2W columns of c held in registers across the whole k loop.
template <std::size_t W>
void gemm_tile(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t i,
               std::size_t j) {
  using V = typename Lanes<W>::type;
  const double* a0 = a + i * k;
  const double* a1 = a0 + k;
  const double* a2 = a1 + k;
  const double* a3 = a2 + k;
  double* c0 = c + i * n + j;
  double* c1 = c0 + n;
  double* c2 = c1 + n;
  double* c3 = c2 + n;
  V x0 = load<W>(c0), y0 = load<W>(c0 + W);
  V x1 = load<W>(c1), y1 = load<W>(c1 + W);
  V x2 = load<W>(c2), y2 = load<W>(c2 + W);
  V x3 = load<W>(c3), y3 = load<W>(c3 + W);
  for (std::size_t p = 0; p < k; ++p) {
    const V bl = load<W>(b + p * n + j);
    const V bh = load<W>(b + p * n + j + W);
    x0 += a0[p] * bl;
    y0 += a0[p] * bh;
    x1 += a1[p] * bl;
    y1 += a1[p] * bh;
    x2 += a2[p] * bl;
    y2 += a2[p] * bh;
    x3 += a3[p] * bl;
    y3 += a3[p] * bh;
  }
  store<W>(c0, x0), store<W>(c0 + W, y0);
  store<W>(c1, x1), store<W>(c1 + W, y1);
  store<W>(c2, x2), store<W>(c2 + W, y2);
  store<W>(c3, x3), store<W>(c3 + W, y3);
}

// c[m x n] += a[m x k] * b[k x n]. Every c[i][j] accumulates its products
// in ascending p, so the blocked and scalar paths agree bit for bit.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) gemm_tile<8>(a, b, c, k, n, i, j);
    for (; j + 8 <= n; j += 8) gemm_tile<4>(a, b, c, k, n, i, j);
    if (j < n) {
      for (std::size_t r = i; r < i + 4; ++r) {
        for (std::size_t p = 0; p < k; ++p) {
          const double s = a[r * k + p];
          for (std::size_t q = j; q < n; ++q) c[r * n + q] += s * b[p * n + q];
        }
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t q = 0; q < n; ++q) ci[q] += s * bp[q];
    }
  }
}

std::vector<double> transpose(std::span<const double> src, std::size_t rows, std::size_t cols);

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto at = transpose(std::span<const double>(a, m * k), m, k);
  gemm_nn(at.data(), b, c, k, m, n);
}

std::vector<double> transpose(std::span<const double> src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(src.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  TensorImpl* ai = &a.impl();
  TensorImpl* bi = &b.impl();
  return make_output({m, n}, std::move(out), "matmul", {a, b}, [ai, bi, m, k, n](const TensorImpl& o) {
    if (ai->requires_grad) {
      const auto bt = transpose(bi->data, k, n);  // [n x k]
      gemm_nn(o.grad.data(), bt.data(), ai->grad_buffer().data(), m, n, k);
    }
    if (bi->requires_grad) gemm_tn(ai->data.data(), o.grad.data(), bi->grad_buffer().data(), m, k, n);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix(x, "linear input");
  require_matrix(weight, "linear weight");
  const std::size_t n = x.rows(), in = x.cols(), out_dim = weight.rows();
  if (weight.cols() != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias.defined() && bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  std::vector<double> out(n * out_dim, 0.0);
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::size_t i = 0; i < n; ++i) std::copy(b.begin(), b.end(), out.begin() + i * out_dim);
  }
  const auto wt = transpose(weight.data(), out_dim, in);
  gemm_nn(x.data().data(), wt.data(), out.data(), n, in, out_dim);

  TensorImpl* xi = &x.impl();
  TensorImpl* wi = &weight.impl();
  TensorImpl* bi = bias.defined() ? &bias.impl() : nullptr;
  return make_output({n, out_dim}, std::move(out), "linear", {x, weight, bias},
                     [xi, wi, bi, n, in, out_dim](const TensorImpl& o) {
                       const double* g = o.grad.data();
                       if (xi->requires_grad) gemm_nn(g, wi->data.data(), xi->grad_buffer().data(), n, out_dim, in);
                       if (wi->requires_grad) gemm_tn(g, xi->data.data(), wi->grad_buffer().data(), n, out_dim, in);
                       if (bi && bi->requires_grad) {
                         auto& bg = bi->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < out_dim; ++j) bg[j] += g[i * out_dim + j];
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  TensorImpl* ai = &a.impl();
  TensorImpl* bi = &b.impl();
  return make_output(a.shape(), std::move(out), "add", {a, b}, [ai, bi](const TensorImpl& o) {
    for (TensorImpl* t : {ai, bi}) {
      if (!t->requires_grad) continue;
      auto& g = t->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor add(const Tensor& a, double b) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += b;
  TensorImpl* ai = &a.impl();
  return make_output(a.shape(), std::move(out), "add_scalar", {a}, [ai](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  TensorImpl* ai = &a.impl();
  TensorImpl* bi = &b.impl();
  return make_output(a.shape(), std::move(out), "mul", {a, b}, [ai, bi](const TensorImpl& o) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  TensorImpl* ai = &a.impl();
  return make_output(a.shape(), std::move(out), "scale", {a}, [ai, s](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(ad[i]);
  TensorImpl* ai = &a.impl();
  return make_output(a.shape(), std::move(out), "sigmoid", {a}, [ai](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.data[i] * (1.0 - o.data[i]);
  });
}

Tensor abs(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(ad[i]);
  TensorImpl* ai = &a.impl();
  // Subgradient 0 at the kink.
  return make_output(a.shape(), std::move(out), "abs", {a}, [ai](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = ai->data[i];
      g[i] += x > 0.0 ? o.grad[i] : (x < 0.0 ? -o.grad[i] : 0.0);
    }
  });
}

namespace {

// tanh(u) = (1 - e) / (1 + e) with e = exp(-2|u|): a third of the cost of
// std::tanh, with absolute error near 1e-16.
double fast_tanh(double u) {
  const double e = std::exp(-2.0 * std::abs(u));
  const double t = (1.0 - e) / (1.0 + e);
  return u < 0.0 ? -t : t;
}

double gelu_tanh(double x) { return fast_tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)); }

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + gelu_tanh(x)); }

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  std::vector<double> tanh_cache(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    tanh_cache[i] = gelu_tanh(ad[i]);
    out[i] = 0.5 * ad[i] * (1.0 + tanh_cache[i]);
  }
  TensorImpl* ai = &a.impl();
  if (!grad_enabled() || !a.requires_grad()) tanh_cache.clear();
  return make_output(a.shape(), std::move(out), "gelu", {a}, [ai, t = std::move(tanh_cache)](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = ai->data[i];
      const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
      const double d = 0.5 * (1.0 + t[i]) + 0.5 * x * (1.0 - t[i] * t[i]) * dinner;
      g[i] += o.grad[i] * d;
    }
  });
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case Elementwise::add:
      return add(a, b);
    case Elementwise::mul:
    case Elementwise::scale:
      return mul(a, b);
    case Elementwise::gelu:
      return gelu(a);
    case Elementwise::sigmoid:
      return sigmoid(a);
  }
  throw ContractError("unknown elementwise kind");
}

Tensor elementwise(Elementwise kind, const Tensor& a, double b) {
  switch (kind) {
    case Elementwise::add:
      return add(a, b);
    case Elementwise::mul:
    case Elementwise::scale:
      return scale(a, b);
    case Elementwise::gelu:
      return gelu(a);
    case Elementwise::sigmoid:
      return sigmoid(a);
  }
  throw ContractError("unknown elementwise kind");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: zero-width rows");
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma " + shape_string(gamma.shape()) + " / beta " +
                         shape_string(beta.shape()) + " do not match rows of " + shape_string(x.shape()));
  }
  const std::size_t n = x.rows();
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gd[j] * h + bd[j];
    }
  }
  TensorImpl* xi = &x.impl();
  TensorImpl* gi = &gamma.impl();
  TensorImpl* bi = &beta.impl();
  return make_output(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                     [xi, gi, bi, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorImpl& o) {
                       const double* g = o.grad.data();
                       if (gi->requires_grad || bi->requires_grad) {
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             if (gi->requires_grad) gi->grad_buffer()[j] += g[r * d + j] * xhat[r * d + j];
                             if (bi->requires_grad) bi->grad_buffer()[j] += g[r * d + j];
                           }
                         }
                       }
                       if (!xi->requires_grad) return;
                       auto& xg = xi->grad_buffer();
                       std::vector<double> dh(d);
                       for (std::size_t r = 0; r < n; ++r) {
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           dh[j] = g[r * d + j] * gi->data[j];
                           mean_dh += dh[j];
                           mean_dh_h += dh[j] * xhat[r * d + j];
                         }
                         mean_dh /= static_cast<double>(d);
                         mean_dh_h /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           xg[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xd.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = std::exp(row[j] - mx);
      z += out[r * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= z;
  }
  TensorImpl* xi = &x.impl();
  return make_output(x.shape(), std::move(out), "softmax", {x}, [xi, n, d](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += o.grad[r * d + j] * o.data[r * d + j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += o.data[r * d + j] * (o.grad[r * d + j] - dot);
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require_matrix(logits, "cross-entropy logits");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) {
    throw DimensionError("cross-entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  const auto ld = logits.data();
  std::vector<double> probs(n * v, 0.0);
  std::vector<int> kept(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ContractError("cross-entropy: target " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(v));
    }
    const double* row = ld.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += -(row[t] - mx - std::log(z));
    ++count;
  }
  if (count == 0) throw NumericalError("cross-entropy: every position is ignored, mean is undefined");
  const double inv = 1.0 / static_cast<double>(count);
  TensorImpl* li = &logits.impl();
  return make_output({1}, {total * inv}, "softmax_cross_entropy", {logits},
                     [li, n, v, inv, ignore_index, kept = std::move(kept), probs = std::move(probs)](
                         const TensorImpl& o) {
                       auto& g = li->grad_buffer();
                       const double s = o.grad[0] * inv;
                       for (std::size_t r = 0; r < n; ++r) {
                         if (kept[r] == ignore_index) continue;
                         for (std::size_t j = 0; j < v; ++j) g[r * v + j] += s * probs[r * v + j];
                         g[r * v + static_cast<std::size_t>(kept[r])] -= s;
                       }
                     });
}

namespace {

// Copies columns [offset, offset + w) of every row into a dense [rows x w] block.
std::vector<double> slice_columns(const double* src, std::size_t rows, std::size_t width, std::size_t offset,
                                  std::size_t w) {
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * width + offset, w, out.data() + r * w);
  return out;
}

void add_columns(double* dst, const std::vector<double>& block, std::size_t rows, std::size_t width,
                 std::size_t offset, std::size_t w) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w; ++c) dst[r * width + offset + c] += block[r * w + c];
  }
}

}  // namespace

Tensor causal_self_attention(const Tensor& qkv, std::size_t n_heads) {
  require_matrix(qkv, "attention input");
  const std::size_t n = qkv.rows(), width = qkv.cols();
  if (n_heads == 0 || width % (3 * n_heads) != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " is not 3 * heads * head_dim for " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t d = width / 3, hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* src = qkv.data().data();
  // probs[h] is a dense n x n block, zero above the diagonal.
  std::vector<double> probs(n_heads * n * n, 0.0);
  std::vector<double> out(n * d, 0.0);
  std::vector<double> scores(n * n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto q = slice_columns(src, n, width, h * hd, hd);
    const auto kt = transpose(slice_columns(src, n, width, d + h * hd, hd), n, hd);
    const auto v = slice_columns(src, n, width, 2 * d + h * hd, hd);
    std::fill(scores.begin(), scores.end(), 0.0);
    gemm_nn(q.data(), kt.data(), scores.data(), n, hd, n);
    double* p = probs.data() + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double* si = scores.data() + i * n;
      double* pi = p + i * n;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, si[j] * inv_sqrt);
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        pi[j] = std::exp(si[j] * inv_sqrt - mx);
        z += pi[j];
      }
      for (std::size_t j = 0; j <= i; ++j) pi[j] /= z;
    }
    std::vector<double> head(n * hd, 0.0);
    gemm_nn(p, v.data(), head.data(), n, n, hd);
    add_columns(out.data(), head, n, d, h * hd, hd);
  }
  TensorImpl* qi_impl = &qkv.impl();
  return make_output(
      {n, d}, std::move(out), "causal_self_attention", {qkv},
      [qi_impl, n, d, hd, n_heads, width, inv_sqrt, probs = std::move(probs)](const TensorImpl& o) {
        const double* src = qi_impl->data.data();
        double* g = qi_impl->grad_buffer().data();
        std::vector<double> dp(n * n), ds(n * n);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const double* p = probs.data() + h * n * n;
          const auto q = slice_columns(src, n, width, h * hd, hd);
          const auto k = slice_columns(src, n, width, d + h * hd, hd);
          const auto v = slice_columns(src, n, width, 2 * d + h * hd, hd);
          const auto dout = slice_columns(o.grad.data(), n, d, h * hd, hd);

          // dP = dO V^T, dV = P^T dO
          std::fill(dp.begin(), dp.end(), 0.0);
          const auto vt = transpose(v, n, hd);
          gemm_nn(dout.data(), vt.data(), dp.data(), n, hd, n);
          std::vector<double> dv(n * hd, 0.0);
          gemm_tn(p, dout.data(), dv.data(), n, n, hd);

          // dS = P * (dP - rowsum(dP * P)) / sqrt(hd), causal part only
          for (std::size_t i = 0; i < n; ++i) {
            const double* pi = p + i * n;
            const double* dpi = dp.data() + i * n;
            double* dsi = ds.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dot += dpi[j] * pi[j];
            for (std::size_t j = 0; j <= i; ++j) dsi[j] = pi[j] * (dpi[j] - dot) * inv_sqrt;
            for (std::size_t j = i + 1; j < n; ++j) dsi[j] = 0.0;
          }

          // dQ = dS K, dK = dS^T Q
          std::vector<double> dq(n * hd, 0.0), dk(n * hd, 0.0);
          gemm_nn(ds.data(), k.data(), dq.data(), n, n, hd);
          gemm_tn(ds.data(), q.data(), dk.data(), n, n, hd);
          add_columns(g, dq, n, width, h * hd, hd);
          add_columns(g, dk, n, width, d + h * hd, hd);
          add_columns(g, dv, n, width, 2 * d + h * hd, hd);
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding table");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab) +
                          " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  TensorImpl* ti = &table.impl();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_output({ids.size(), d}, std::move(out), "embedding", {table},
                     [ti, d, idv = std::move(idv)](const TensorImpl& o) {
                       auto& g = ti->grad_buffer();
                       for (std::size_t i = 0; i < idv.size(); ++i) {
                         const std::size_t base = static_cast<std::size_t>(idv[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) g[base + j] += o.grad[i * d + j];
                       }
                     });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_rows top");
  require_matrix(b, "concat_rows bottom");
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: width mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t split = a.numel();
  TensorImpl* ai = &a.impl();
  TensorImpl* bi = &b.impl();
  return make_output({a.rows() + b.rows(), a.cols()}, std::move(out), "concat_rows", {a, b},
                     [ai, bi, split](const TensorImpl& o) {
                       if (ai->requires_grad) {
                         auto& g = ai->grad_buffer();
                         for (std::size_t i = 0; i < split; ++i) g[i] += o.grad[i];
                       }
                       if (bi->requires_grad) {
                         auto& g = bi->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[split + i];
                       }
                     });
}

Tensor select_row(const Tensor& x, std::size_t row) {
  require_matrix(x, "select_row input");
  if (row >= x.rows()) {
    throw DimensionError("select_row: row " + std::to_string(row) + " outside " + shape_string(x.shape()));
  }
  const std::size_t d = x.cols();
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(row * d),
                          x.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
  TensorImpl* xi = &x.impl();
  return make_output({1, d}, std::move(out), "select_row", {x}, [xi, row, d](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t j = 0; j < d; ++j) g[row * d + j] += o.grad[j];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  TensorImpl* xi = &x.impl();
  return make_output({1}, {total}, "sum", {x}, [xi](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  Tensor probe(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  const Tensor loss = f(probe);
  if (loss.numel() != 1) {
    throw ContractError("grad_check: function must be scalar-valued, got " + shape_string(loss.shape()));
  }
  backward(loss);
  std::vector<double> analytic(probe.numel(), 0.0);
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  std::vector<double> values(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto shifted = values;
    shifted[i] = values[i] + step;
    const double up = f(Tensor(x.shape(), shifted)).item();
    shifted[i] = values[i] - step;
    const double down = f(Tensor(x.shape(), shifted)).item();
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace atelier
