#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "transfollower/rng.hpp"

namespace transfollower {

using Shape = std::vector<std::size_t>;

class Tape;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until materialized
  bool requires_grad = false;
  const Tape* creator = nullptr;  // tape that produced this node, if any

  std::size_t size() const { return values.size(); }
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

#ifndef NDEBUG
#define TFL_DASSERT_FINITE(vec, what) \
  assert(::transfollower::detail::all_finite(vec) && what)
#else
#define TFL_DASSERT_FINITE(vec, what) ((void)0)
#endif

// Dense row-major float64 tensor with an optional gradient buffer. Copying a
// Tensor copies the handle, not the storage; ops always allocate fresh nodes.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : node_(std::make_shared<detail::TensorNode>()) {
    for (std::size_t d : shape)
      if (d == 0) throw std::invalid_argument("Tensor: zero dimension in shape");
    node_->values.assign(detail::shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values)
      : node_(std::make_shared<detail::TensorNode>()) {
    if (detail::shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor: shape " + detail::shape_str(shape) +
                                  " does not match value count " +
                                  std::to_string(values.size()));
    node_->shape = std::move(shape);
    node_->values = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const {
    return node_->shape.size() == 1 ? 1 : node_->shape.at(1);
  }

  std::vector<double>& values() { return node_->values; }
  const std::vector<double>& values() const { return node_->values; }

  double& operator()(std::size_t i) { return node_->values[i]; }
  double operator()(std::size_t i) const { return node_->values[i]; }
  double& operator()(std::size_t i, std::size_t j) {
    return node_->values[i * cols() + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return node_->values[i * cols() + j];
  }

  double value() const {
    if (size() != 1)
      throw std::invalid_argument("Tensor::value: tensor is not scalar, shape " +
                                  detail::shape_str(shape()));
    return node_->values[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    return *this;
  }

  // Gradient buffer; materialized (zero-filled) on first access.
  std::vector<double>& grad() {
    if (!node_->requires_grad)
      throw std::logic_error("Tensor::grad: tensor does not require grad");
    if (node_->grad.empty()) node_->grad.assign(size(), 0.0);
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  void fill(double v) { std::fill(node_->values.begin(), node_->values.end(), v); }

  // Detached copy: same values, no grad, no history.
  Tensor detached() const { return Tensor(shape(), values()); }

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

  std::shared_ptr<detail::TensorNode> node_;
};

// Per-parameter gradient sink for concurrent backward passes over shared
// parameters: leaves accumulate here instead of into node->grad, so several
// tapes can run backward at once and the caller reduces stores in a fixed
// order afterwards.
class GradStore {
public:
  std::vector<double>& buffer_for(const detail::TensorNode* n, std::size_t size) {
    auto it = buffers_.find(n);
    if (it == buffers_.end())
      it = buffers_.emplace(n, std::vector<double>(size, 0.0)).first;
    return it->second;
  }
  const std::vector<double>* find(const detail::TensorNode* n) const {
    auto it = buffers_.find(n);
    return it == buffers_.end() ? nullptr : &it->second;
  }

private:
  std::unordered_map<const detail::TensorNode*, std::vector<double>> buffers_;
};

// Reverse-mode tape. Constructing a Tape pushes it as the active recorder for
// the current thread; ops append entries in execution order, which keeps the
// list topologically sorted by construction. backward() walks it once in
// reverse. Tapes on different threads are fully independent.
class Tape {
public:
  Tape() : prev_(tls_current()) { tls_current() = this; }
  ~Tape() { tls_current() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return tls_current(); }

  std::size_t size() const { return entries_.size(); }

  using PullFn =
      std::function<void(const std::vector<double>& out_adj,
                         const std::function<std::vector<double>&(const Tensor&)>& adj_of)>;

  // Called by ops: registers `output` as produced by `inputs` with a local
  // gradient rule. The rule receives the output adjoint and an accessor that
  // returns the (zero-initialized) adjoint buffer of an input to add into.
  void record(const Tensor& output, std::vector<Tensor> inputs, PullFn pull) {
    output.node()->requires_grad = true;
    output.node()->creator = this;
    entries_.push_back(Entry{output.node_ptr(), std::move(inputs), std::move(pull)});
  }

  // Backpropagate from a scalar loss. Accumulates into node->grad of every
  // requires-grad tensor the loss depends on (additively across calls).
  void backward(const Tensor& loss) { run_backward(loss, nullptr); }

  // As backward(), but gradients of *leaves* (tensors this tape did not
  // produce, i.e. parameters and inputs) go into `sink` instead of
  // node->grad. Intermediate node state is never touched, so this is safe to
  // run concurrently with other tapes sharing the same parameters.
  void backward(const Tensor& loss, GradStore& sink) { run_backward(loss, &sink); }

private:
  struct Entry {
    std::shared_ptr<detail::TensorNode> output;
    std::vector<Tensor> inputs;  // keeps the graph alive
    PullFn pull;
  };

  static Tape*& tls_current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  void run_backward(const Tensor& loss, GradStore* sink) {
    if (loss.size() != 1)
      throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " +
                                  detail::shape_str(loss.shape()));
    if (loss.node()->creator != this)
      throw std::invalid_argument("Tape::backward: loss was not recorded on this tape");

    std::unordered_map<const detail::TensorNode*, std::vector<double>> adj;
    adj[loss.node()] = {1.0};

    auto adj_of = std::function<std::vector<double>&(const Tensor&)>(
        [&adj](const Tensor& t) -> std::vector<double>& {
          auto it = adj.find(t.node());
          if (it == adj.end())
            it = adj.emplace(t.node(), std::vector<double>(t.size(), 0.0)).first;
          return it->second;
        });

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      auto found = adj.find(it->output.get());
      if (found == adj.end()) continue;  // not on the path to the loss
      it->pull(found->second, adj_of);
    }

    // Flush adjoints of requires-grad nodes.
    for (auto& [node, buf] : adj) {
      auto* n = const_cast<detail::TensorNode*>(node);
      if (!n->requires_grad) continue;
      TFL_DASSERT_FINITE(buf, "backward produced non-finite gradient");
      if (sink != nullptr) {
        if (n->creator != this) {  // leaf: shared parameter or input
          auto& out = sink->buffer_for(n, n->values.size());
          for (std::size_t i = 0; i < buf.size(); ++i) out[i] += buf[i];
        }
      } else {
        if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
        for (std::size_t i = 0; i < buf.size(); ++i) n->grad[i] += buf[i];
      }
    }
  }

  std::vector<Entry> entries_;
  Tape* prev_ = nullptr;
};

namespace detail {

// True when the op must be recorded: a tape is active and some input is part
// of the differentiable state.
inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace transfollower
