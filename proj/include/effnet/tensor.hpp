#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace effnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

/// One recorded operation. `backward` receives the output value and its
/// gradient and adds contributions into the gradients of `inputs`.
struct Node {
  std::uint64_t seq = 0;
  std::string kind;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out, std::span<const double> grad_out,
                     Node& self)>
      backward;
  bool consumed = false;
};

/// Leaves elements uninitialized on resize.
template <class T>
struct UninitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <class U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double, UninitAllocator<double>> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  /// Gradient buffer of this tensor, allocated (zeroed) on first use.
  std::span<double> grad_buffer();
  /// Like grad_buffer, but a fresh buffer is left uninitialized and `fresh`
  /// is set; the caller must then overwrite every element.
  std::span<double> grad_buffer_for_write(bool& fresh);
};

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Dense row-major tensor of doubles. Copies share the underlying value;
/// values are never modified after creation except for leaf tensors via
/// `mutable_data()` (optimizer updates, initialization).
///
/// Gradients of leaves accumulate across backward passes of distinct graphs
/// until `zero_grad()`; calling backward twice on the same graph is an error.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  /// Writable storage; only permitted on leaf tensors.
  std::span<double> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Populates `grad()` on every
  /// requires_grad leaf reachable from here and releases the graph.
  void backward() const;

  /// Same storage, new shape (element count must match). Differentiable.
  Tensor reshape(Shape shape) const;

  /// Deep copy with no graph history.
  Tensor detach() const;

  detail::TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

using BackwardFn = std::function<void(const TensorImpl& out,
                                      std::span<const double> grad_out,
                                      Node& self)>;

/// Wraps a freshly computed value as an op output. Checks finiteness and
/// records a graph node when any input requires a gradient.
Tensor make_result(const char* kind, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace detail

}  // namespace effnet
