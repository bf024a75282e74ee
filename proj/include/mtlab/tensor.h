#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mtlab/common.h"

namespace mtlab {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& out)>;

// One vertex of the dynamic autodiff graph. `grad` stays empty until a
// backward pass reaches the node.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  bool is_leaf() const { return parents.empty(); }
  // Zero-initialises grad on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

// Dense row-major float64 tensor handle. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Builds an op result. When no input requires grad the node is created
  // without parents or a backward function, so no graph is retained.
  static Tensor from_op(Shape shape, std::vector<double> data,
                        const std::vector<Tensor>& inputs, const char* op,
                        detail::BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only

  std::span<const double> data() const;
  // Writable view for initialisation and optimiser updates of leaf tensors.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no graph history.
  Tensor detach() const;
  const char* op_name() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// While a guard is alive on this thread, ops record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Reverse topological record of the graph that produced a scalar loss.
// Every node appears after all of its inputs.
class Tape {
 public:
  static Tape record(const Tensor& loss);

  std::size_t size() const { return order_.size(); }
  std::span<detail::Node* const> nodes() const { return order_; }

  // Clears interior grads, seeds d(loss)/d(loss) = 1 and propagates once
  // through every node in reverse order. Leaf grads accumulate.
  void backward();

 private:
  std::vector<detail::Node*> order_;
  std::shared_ptr<detail::Node> root_;
};

// Convenience: Tape::record(loss).backward(). Throws if loss is not scalar.
void backward(const Tensor& loss);

}  // namespace mtlab
