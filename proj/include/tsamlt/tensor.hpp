#pragma once

// Dense row-major f64 tensors with a dynamic reverse-mode tape.
//
// Usage:
//   tensor::Tape tape;
//   {
//     tensor::TapeScope scope(tape);
//     auto loss = tensor::sum(tensor::matmul(a, b));
//     tape.backward(loss);
//   }
//
// Ops only record when a tape is active on the calling thread and at least
// one input requires a gradient. Without an active tape every op is a pure
// forward computation, which is what evaluation workers use.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsamlt/errors.hpp"

namespace tsamlt::tensor {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> values) {
    const auto n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
    return t;
  }

  /// Leaf tensor whose gradient is accumulated by Tape::backward.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rows() const { return rank() == 2 ? dim(0) : 1; }
  std::size_t cols() const { return rank() == 2 ? dim(1) : dim(0); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }
  double item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no gradient linkage.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of executed ops. Backward replays the records in exact
/// reverse execution order and may run once per reset.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node> out, std::function<void()> backward) {
    if (consumed_) throw TapeError("tape: recording after backward without reset");
    records_.push_back({std::move(out), std::move(backward)});
  }

  void backward(const Tensor& loss) {
    if (consumed_) throw TapeError("tape: backward called twice without reset");
    if (loss.size() != 1) {
      throw TapeError("tape: backward needs a scalar loss, got shape " +
                      to_string(loss.shape()));
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out->grad.empty()) continue;
      it->backward();
      if (hook_) hook_(records_.rend() - it - 1);
    }
  }

  void reset() {
    records_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  /// Observer called with the record index after each backward step.
  void set_backward_hook(std::function<void(std::size_t)> hook) {
    hook_ = std::move(hook);
  }

 private:
  struct Record {
    std::shared_ptr<Node> out;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
  std::function<void(std::size_t)> hook_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}  // namespace detail

/// Makes `tape` the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape) {
    detail::active_tape = &tape;
  }
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the current thread (evaluation, finite differences).
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

inline bool recording() { return detail::active_tape != nullptr; }

namespace detail {

inline void check_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

/// Builds an op output. The result is tracked when a tape is active and any
/// input requires a gradient; the caller then attaches the adjoint via
/// `on_backward`.
inline Tensor make_output(const char* op, Shape shape, std::vector<double> values,
                          std::initializer_list<const Tensor*> inputs) {
  check_finite(op, values);
  Tensor out(std::move(shape), std::move(values));
  if (active_tape) {
    for (const Tensor* in : inputs) {
      if (in->requires_grad()) {
        out.set_requires_grad(true);
        break;
      }
    }
  }
  return out;
}

inline Tensor make_output(const char* op, Shape shape, std::vector<double> values,
                          const std::vector<Tensor>& inputs) {
  check_finite(op, values);
  Tensor out(std::move(shape), std::move(values));
  if (active_tape) {
    for (const Tensor& in : inputs) {
      if (in.requires_grad()) {
        out.set_requires_grad(true);
        break;
      }
    }
  }
  return out;
}

inline void on_backward(const Tensor& out, std::function<void()> fn) {
  if (out.requires_grad() && active_tape) {
    active_tape->record(out.node(), std::move(fn));
  }
}

/// Gradient buffer of `n` if it participates in differentiation, else empty.
inline std::span<double> grad_of(Node& n) {
  if (!n.requires_grad) return {};
  return n.grad_buffer();
}

}  // namespace detail

}  // namespace tsamlt::tensor
