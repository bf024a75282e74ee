#include "mtlab/tensor.h"

#include <algorithm>
#include <unordered_set>
#include <utility>

#include <fmt/format.h>

namespace mtlab {

std::string shape_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, "x"));
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace detail {

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw Error(fmt::format("tensor shape {} has a zero dimension", shape_string(shape)));
  }
  if (shape_numel(shape) != data.size()) {
    throw Error(fmt::format("tensor shape {} needs {} values, got {}", shape_string(shape),
                            shape_numel(shape), data.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::from_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                       const char* op, detail::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data), false);
  out.node_->op = op;
  const bool needs_grad = grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                                        [](const Tensor& t) { return t.requires_grad(); });
  if (needs_grad) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) out.node_->parents.push_back(t.node_);
    out.node_->backward = std::move(backward);
  }
  return out;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw Error(fmt::format("axis {} out of range for shape {}", axis, shape_string(shape())));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw Error(fmt::format("expected a matrix, got shape {}", shape_string(shape())));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw Error(fmt::format("expected a matrix, got shape {}", shape_string(shape())));
  return node_->shape[1];
}

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw Error(fmt::format("item() on non-scalar shape {}", shape_string(shape())));
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const { return node_->data[row * cols() + col]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }
const char* Tensor::op_name() const { return node_->op; }

Tape Tape::record(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw Error(fmt::format("backward needs a scalar loss, got shape {}", shape_string(loss.shape())));
  }
  Tape tape;
  tape.root_ = loss.node_ptr();
  if (!loss.requires_grad()) return tape;

  // Iterative post-order DFS; parents are visited in declaration order so the
  // resulting order is a pure function of the graph.
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(tape.root_.get(), 0);
  visited.insert(tape.root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::backward() {
  if (order_.empty()) return;
  for (detail::Node* node : order_) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
  }
  root_->grad_buffer()[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward) node->backward(*node);
  }
}

void backward(const Tensor& loss) { Tape::record(loss).backward(); }

}  // namespace mtlab
