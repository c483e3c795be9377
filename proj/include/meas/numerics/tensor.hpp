#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "meas/numerics/errors.hpp"

namespace meas {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads `grad` of the node it is attached to and accumulates into inputs.
  std::function<void(const Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::span<T> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Shared handle to a node of the dynamic computation graph. Copies alias the
/// same storage; operations never mutate their inputs.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access, for initialization and optimizer updates of leaves.
  std::span<T> data_mut() const { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) const { node_->requires_grad = value; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() const { return node_->grad_buffer(); }
  void zero_grad() const;

  const std::string& op() const { return node_->op; }
  /// Same values, fresh leaf with no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Reverse-mode sweep from a single-element root. Leaf gradients accumulate
/// across calls until zero_grad(); intermediate gradients are reset.
template <typename T>
void backward(const Tensor<T>& root);

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

namespace testing {
// Scales the incoming gradient of every node produced by `op` during
// backward. Empty string disables. Used to prove that grad_check catches a
// broken derivative.
void set_corrupted_op(std::string op);
const std::string& corrupted_op();
}  // namespace testing

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, const std::string& op, const char* what);

/// Wraps freshly computed values into a graph node. Records `backward_fn`
/// only when recording is on and some input requires a gradient.
template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const Node<T>&)> backward_fn);

}  // namespace detail

}  // namespace meas
