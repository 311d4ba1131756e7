#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rescan/errors.hpp"

namespace rescan {

// NCHW extents of a rank-4 tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
  }
};

namespace detail {

// Allocator whose value-less construct() leaves trivial elements
// uninitialised; op outputs are always fully overwritten.
template <typename T>
struct DefaultInitAllocator {
  using value_type = T;
  // Fixed alignment makes vectorised reductions start at the same element
  // for a given shape, so results do not depend on where the heap put them.
  static constexpr std::align_val_t kAlignment{64};

  DefaultInitAllocator() noexcept = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    ::new (static_cast<void*>(ptr)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  bool operator==(const DefaultInitAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, DefaultInitAllocator<T>>;

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Rank-4 array with an optional gradient buffer and a link into the
/// autograd graph. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ConfigError("negative tensor extent " + shape.str());
    }
    node_->shape = shape;
    node_->data.assign(shape.numel(), fill);
  }

  Tensor(Shape shape, std::span<const T> values) : node_(std::make_shared<Node>()) {
    if (values.size() != shape.numel()) {
      throw ConfigError("tensor " + shape.str() + " needs " +
                        std::to_string(shape.numel()) + " values, got " +
                        std::to_string(values.size()));
    }
    node_->shape = shape;
    node_->data.assign(values.begin(), values.end());
  }
  Tensor(Shape shape, const std::vector<T>& values)
      : Tensor(shape, std::span<const T>(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, T value) { return Tensor(shape, value); }
  static Tensor scalar(T value) { return Tensor(Shape{1, 1, 1, 1}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  const char* op() const { return node_->op; }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient view; allocates a zero buffer on first access.
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  T item() const {
    if (numel() != 1) {
      throw ConfigError("item() on non-scalar tensor " + shape().str());
    }
    return node_->data[0];
  }

  T& at(int n, int c, int y, int x) { return node_->data[offset(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return node_->data[offset(n, c, y, x)]; }

  // Same values, no graph linkage, no gradient.
  Tensor clone() const { return Tensor(shape(), node_->data); }
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Creates an op result. The graph edge to `parents` is recorded only when
  /// grad mode is on and at least one parent requires a gradient.
  static Tensor make_result(Shape shape, const char* op,
                            std::initializer_list<const Tensor*> parents) {
    Tensor out;
    out.node_ = std::make_shared<Node>();
    out.node_->shape = shape;
    out.node_->data.resize(shape.numel());  // left uninitialised
    out.node_->op = op;
    if (!grad_enabled()) return out;
    for (const Tensor* p : parents) {
      if (p != nullptr && p->defined() && p->requires_grad()) {
        out.node_->requires_grad = true;
        break;
      }
    }
    if (out.node_->requires_grad) {
      for (const Tensor* p : parents) {
        if (p != nullptr && p->defined()) out.node_->parents.push_back(p->node_);
      }
    }
    return out;
  }

 private:
  std::size_t offset(int n, int c, int y, int x) const {
    const Shape& s = node_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x;
  }

  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar root. Gradients accumulate into every
/// node that requires one; call zero_grad() between independent sweeps.
template <typename T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ConfigError("backward() needs a scalar root, got " + loss.shape().str());
  }
  if (!loss.requires_grad()) return;

  using Node = detail::Node<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward();
  }
}

}  // namespace rescan
