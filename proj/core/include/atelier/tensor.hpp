#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace atelier {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorImpl;

// One recorded operation. The node owns its operands, so a graph stays alive
// as long as its output does. Outputs are never referenced from the node.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient"
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;  // null for leaves

  // Zero-filled on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

// Dense row-major float64 tensor with reverse-mode autodiff.
//
// Tensor is a handle: copies share storage, like a smart pointer. Parameters
// are leaves created with requires_grad=true; every op on a tensor that
// requires grad records a node, and backward() walks those nodes in reverse
// topological order. Leaf gradients accumulate across backward passes until
// zero_grad() is called. A graph may be backpropagated once; a second
// backward() through the same loss raises ContractError.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;
  // Leading extent for 2-D use; rows() * cols() == numel().
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Writable view. Only meaningful on leaves (parameters, inputs); writing
  // through it after an op has consumed the tensor invalidates that graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // New leaf holding a copy of the data, detached from any graph.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode pass from a scalar produced through the graph. Populates
// grad() on every leaf that requires it; shared operands sum their parts.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace atelier
