#ifndef RPFEM_TENSOR_HPP_
#define RPFEM_TENSOR_HPP_

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rpfem/errors.hpp"

namespace rpfem {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Plain row-major array of doubles. No gradient bookkeeping.
struct NDArray {
  Shape shape;
  std::vector<double> data;

  NDArray() = default;
  explicit NDArray(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
  NDArray(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size()) {
      throw DimensionError("NDArray: shape " + shape_str(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
  }

  static NDArray filled(Shape s, double value) {
    NDArray out(std::move(s));
    std::fill(out.data.begin(), out.data.end(), value);
    return out;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  friend bool operator==(const NDArray&, const NDArray&) = default;
};

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct Node {
  NDArray value;
  std::optional<NDArray> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(Node&)> backward;
  const char* op = "leaf";
  std::uint64_t seq = sequence_counter().fetch_add(1, std::memory_order_relaxed);

  NDArray& grad_buffer() {
    if (!grad) grad.emplace(value.shape);
    return *grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
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

class GradTape;

/// Handle to a value that may take part in reverse-mode differentiation.
/// Copies share the underlying node, like parameter handles in most
/// autodiff frameworks.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(NDArray value, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : Tensor(NDArray(std::move(shape), std::move(values)), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(NDArray(std::move(shape)), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t dim(std::size_t axis) const { return node_->value.shape.at(axis); }
  std::size_t rank() const { return node_->value.shape.size(); }
  std::size_t size() const { return node_->value.data.size(); }

  const NDArray& value() const { return node_->value; }
  std::span<const double> data() const { return node_->value.data; }
  /// Mutable access for optimizers and finite-difference probes. Writing
  /// through this does not invalidate recorded graphs.
  std::span<double> mutable_data() { return node_->value.data; }

  double item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value.data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->grad.has_value(); }
  const NDArray& grad() const {
    if (!node_->grad) throw ContractError("tensor has no gradient");
    return *node_->grad;
  }
  NDArray& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.reset(); }

  /// Same values, cut from any recorded graph.
  Tensor detach() const { return Tensor(node_->value, false); }

  /// Seeds d(this)/d(this) = 1 and propagates through the recorded graph.
  void backward() const;

  const char* op() const { return node_->op; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of the operations reachable from a root, in creation
/// order. Replaying it back to front visits each operation once in reverse
/// topological order; node creation order is a topological order because an
/// operation's inputs always exist before it does.
class GradTape {
public:
  explicit GradTape(const Tensor& root) {
    std::vector<detail::Node*> stack{root.node().get()};
    std::unordered_set<const detail::Node*> seen{root.node().get()};
    while (!stack.empty()) {
      detail::Node* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad) continue;
      nodes_.push_back(n);
      for (const auto& in : n->inputs) {
        if (seen.insert(in.get()).second) stack.push_back(in.get());
      }
    }
    std::sort(nodes_.begin(), nodes_.end(),
              [](const detail::Node* a, const detail::Node* b) {
                return a->seq < b->seq;
              });
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<detail::Node*>& nodes() const { return nodes_; }

  /// Runs adjoints from the last recorded node to the first. Returns the
  /// op names in visitation order.
  std::vector<const char*> replay() const {
    std::vector<const char*> visited;
    visited.reserve(nodes_.size());
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node* n = *it;
      visited.push_back(n->op);
      if (n->backward && n->grad) n->backward(*n);
    }
    return visited;
  }

private:
  std::vector<detail::Node*> nodes_;
};

inline void Tensor::backward() const {
  if (size() != 1) {
    throw ContractError("backward() needs a scalar, got shape " +
                        shape_str(shape()));
  }
  if (!requires_grad()) return;
  GradTape tape(*this);
  // Intermediate adjoints restart from zero; leaves accumulate.
  for (detail::Node* n : tape.nodes()) {
    if (n->backward) n->grad.reset();
  }
  node_->grad_buffer().data[0] += 1.0;
  tape.replay();
}

namespace detail {

/// Wraps a forward result; records the adjoint only when some input needs it.
inline Tensor record(NDArray value, std::vector<Tensor> inputs, const char* op,
                     std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

/// Grad buffer of input k if it participates, else nullptr.
inline NDArray* input_grad(Node& n, std::size_t k) {
  Node& in = *n.inputs[k];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace rpfem

#endif  // RPFEM_TENSOR_HPP_
