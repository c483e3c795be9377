#include "meas/numerics/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace meas {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::string& corrupted_op_storage() {
  static std::string op;
  return op;
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

namespace testing {
void set_corrupted_op(std::string op) { corrupted_op_storage() = std::move(op); }
const std::string& corrupted_op() { return corrupted_op_storage(); }
}  // namespace testing

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_data({1}, {value});
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() const {
  node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(shape(), node_->data, false);
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("backward() needs a single-element root");
  }
  // Iterative post-order DFS; creation order is not relied upon.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), T(0));
  }
  root.node()->grad_buffer()[0] += T(1);

  const std::string& corrupted = testing::corrupted_op();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf()) continue;
    if (!corrupted.empty() && node->op == corrupted) {
      for (auto& g : node->grad) g *= T(1.5);
    }
    node->backward_fn(*node);
    for (const auto& input : node->inputs) {
      if (input->requires_grad && !input->grad.empty()) {
        detail::check_finite<T>(input->grad, node->op, "gradient");
      }
    }
  }
}

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, const std::string& op, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericalError(op, std::string("non-finite ") + what + " at flat index " +
                                   std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const Node<T>&)> backward_fn) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError(op + ": internal shape mismatch " + shape_str(shape));
  }
  check_finite<T>(data, op, "value");
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& input : inputs) {
      if (input.defined() && input.requires_grad()) needs_grad = true;
    }
  }
  if (needs_grad && backward_fn) {
    node->requires_grad = true;
    for (const auto& input : inputs) {
      if (input.defined()) node->inputs.push_back(input.node_ptr());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template void check_finite<float>(std::span<const float>, const std::string&, const char*);
template void check_finite<double>(std::span<const double>, const std::string&, const char*);
template Tensor<float> make_result(std::string, Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(const Node<float>&)>);
template Tensor<double> make_result(std::string, Shape, std::vector<double>,
                                    std::vector<Tensor<double>>,
                                    std::function<void(const Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace meas
