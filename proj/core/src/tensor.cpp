#include "atelier/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "atelier/errors.hpp"

namespace atelier {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<double>& detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::numel() const { return impl_->data.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 1 ? 1 : numel() / s.back();
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
  return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  auto& root = loss.impl();
  if (!root.grad_fn) {
    if (!root.requires_grad) throw ContractError("backward() on a tensor that is not part of a graph");
    root.grad_buffer()[0] += 1.0;
    return;
  }
  if (root.grad_fn->consumed) {
    throw ContractError("graph already consumed by a previous backward pass");
  }

  // Iterative post-order DFS gives a topological order (operands first).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(root.grad_fn.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    auto& inputs = impl->grad_fn->inputs;
    if (next < inputs.size()) {
      detail::TensorImpl* child = inputs[next++].get();
      if (child->grad_fn && child->requires_grad && !visited.count(child->grad_fn.get())) {
        if (child->grad_fn->consumed) {
          throw ContractError("graph already consumed by a previous backward pass");
        }
        visited.insert(child->grad_fn.get());
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  root.grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* out = *it;
    auto node = out->grad_fn;
    if (!out->grad.empty() && node->backward) node->backward(*out);
    node->consumed = true;
    node->backward = nullptr;
    // Interior gradients are no longer needed once propagated.
    if (out != &root) {
      out->grad.clear();
      out->grad.shrink_to_fit();
    }
  }
}

}  // namespace atelier
