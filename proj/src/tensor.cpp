// SPDX-License-Identifier: Apache-2.0
#include "rfp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace rfp {

namespace {

thread_local uint64_t g_node_counter = 0;
thread_local bool g_grad_enabled = true;
#ifdef NDEBUG
thread_local bool g_finite_checks = false;
#else
thread_local bool g_finite_checks = true;
#endif

void check_finite(std::span<const Real> v, const char* what) {
  for (Real x : v) {
    if (!std::isfinite(x)) throw ContractError(std::string("non-finite value in ") + what);
  }
}

}  // namespace

Shape::Shape(std::initializer_list<int64_t> dims) : Shape(std::vector<int64_t>(dims)) {}

Shape::Shape(std::vector<int64_t> dims) : dims_(std::move(dims)) {
  if (dims_.size() > 4) throw ContractError("tensor rank above 4: " + str());
  for (int64_t d : dims_) {
    if (d < 0) throw ContractError("negative extent in shape " + str());
  }
}

int64_t Shape::numel() const noexcept {
  int64_t n = 1;
  for (int64_t d : dims_) n *= d;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

namespace detail {

std::vector<Real>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), Real(0));
  return grad;
}

uint64_t next_node_id() { return ++g_node_counter; }

}  // namespace detail

namespace {

std::shared_ptr<detail::Node> new_leaf(const Shape& shape, std::vector<Real> values,
                                       bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != shape.numel()) {
    throw ContractError("value count " + std::to_string(values.size()) +
                        " does not match shape " + shape.str());
  }
  auto node = std::make_shared<detail::Node>();
  node->id = detail::next_node_id();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, Real(0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, Real value, bool requires_grad) {
  return Tensor(new_leaf(shape, std::vector<Real>(static_cast<size_t>(shape.numel()), value),
                         requires_grad));
}

Tensor Tensor::from(const Shape& shape, std::vector<Real> values, bool requires_grad) {
  if (g_finite_checks) check_finite(values, "tensor construction");
  return Tensor(new_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

uint64_t Tensor::id() const { return node_ ? node_->id : 0; }

std::span<const Real> Tensor::values() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

std::span<Real> Tensor::mutable_values() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

Real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
  return node_->value[0];
}

Real Tensor::at(std::initializer_list<int64_t> index) const {
  const auto& dims = shape().dims();
  if (index.size() != dims.size()) throw ContractError("index rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t ix : index) {
    if (ix < 0 || ix >= dims[i]) throw ContractError("index out of range");
    flat = flat * dims[i] + ix;
    ++i;
  }
  return node_->value[static_cast<size_t>(flat)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

std::span<Real> Tensor::mutable_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

void Tensor::clear_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach(bool requires_grad) const {
  return Tensor(new_leaf(shape(), node_->value, requires_grad));
}

Tensor make_result(const Shape& shape, std::vector<Real> values, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn) {
  if (g_finite_checks) check_finite(values, "op output");
  auto node = new_leaf(shape, std::move(values), false);
  if (g_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const Tensor& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) {
        if (p.defined()) node->parents.push_back(p.node());
      }
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward() requires a scalar root");
  }
  if (!root.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node().get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  root.node()->ensure_grad()[0] += Real(1);
  for (detail::Node* n : order) {
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    if (g_finite_checks) {
      for (auto& p : n->parents) {
        if (!p->grad.empty()) check_finite(p->grad, "gradient");
      }
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }

}  // namespace rfp
