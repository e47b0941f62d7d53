#include "effnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "effnet/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace effnet {

namespace {

thread_local bool t_grad_enabled = true;

#if defined(__GLIBC__)
// Activation buffers are large and short-lived; keeping them on the heap
// instead of fresh mmap regions avoids re-faulting pages every step.
const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif
std::atomic<std::uint64_t> g_node_counter{0};

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_mode_enabled() { return t_grad_enabled; }

std::span<double> detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

std::span<double> detail::TensorImpl::grad_buffer_for_write(bool& fresh) {
  fresh = grad.empty();
  if (fresh) grad.resize(data.size());
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw UsageError("item() on tensor of shape " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

std::span<double> Tensor::mutable_data() {
  if (impl_->grad_fn) throw UsageError("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn) throw UsageError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
}

bool Tensor::is_leaf() const { return !impl_->grad_fn; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() { return impl_->grad_buffer(); }

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const {
  if (impl_->data.size() != 1) {
    throw UsageError("backward() requires a scalar, got shape " +
                     shape_str(impl_->shape));
  }
  if (!impl_->grad_fn) {
    if (!impl_->requires_grad) {
      throw UsageError("backward() on a tensor that is not part of a graph");
    }
    impl_->grad_buffer()[0] += 1.0;
    return;
  }
  if (impl_->grad_fn->consumed) {
    throw UsageError("backward() called twice on the same graph");
  }

  // Creation order is a topological order, so descending sequence numbers
  // give an exact reverse topological traversal.
  using ImplPtr = std::shared_ptr<detail::TensorImpl>;
  std::vector<ImplPtr> nodes;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<ImplPtr> stack{impl_};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto cur = stack.back();
    stack.pop_back();
    if (!cur->grad_fn) continue;
    if (cur->grad_fn->consumed) {
      throw UsageError("backward() through a graph that was already consumed");
    }
    nodes.push_back(cur);
    for (auto& in : cur->grad_fn->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) {
        stack.push_back(in);
      }
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) {
    return a->grad_fn->seq > b->grad_fn->seq;
  });

  impl_->grad.assign(1, 1.0);
  for (auto& cur : nodes) {
    auto& node = *cur->grad_fn;
    if (!cur->grad.empty()) node.backward(*cur, cur->grad, node);
    node.consumed = true;
    node.backward = nullptr;
    node.inputs.clear();
    cur->grad.clear();
    cur->grad.shrink_to_fit();
  }
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape " + shape_str(impl_->shape) + " -> " +
                     shape_str(shape) + " changes element count");
  }
  return detail::make_result(
      "reshape", std::move(shape), impl_->data, {*this},
      [](const detail::TensorImpl&, std::span<const double> g,
         detail::Node& self) {
        auto dst = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      });
}

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data, false); }

Tensor detail::make_result(const char* kind, Shape shape, std::vector<double> data,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  // Exponent bits all set <=> Inf or NaN. Integer OR-reduction vectorizes.
  constexpr std::uint64_t kExpMask = 0x7FF0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : data) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    bad |= static_cast<std::uint64_t>((bits & kExpMask) == kExpMask);
  }
  if (bad) throw NumericError(std::string(kind) + " produced a non-finite value");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    auto node = std::make_shared<Node>();
    node->seq = g_node_counter.fetch_add(1, std::memory_order_relaxed);
    node->kind = kind;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl_ptr());
    node->backward = std::move(backward);
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

}  // namespace effnet
