#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "npath/tensor.hpp"

namespace npath {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only meaningful
// together with the Tape that produced it.
class Var {
 public:
  Var() = default;
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }
  const Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(const Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  const Tape* tape_ = nullptr;
  std::size_t index_ = std::numeric_limits<std::size_t>::max();
};

// Reverse-mode tape. Operations append nodes in evaluation order, so the node
// list is always topologically sorted and backward is a single reverse sweep.
//
// A tape is single-evaluation state: build, call backward once, read grads.
// Never share one tape between threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. The *_ref variants borrow the tensor, which must outlive the tape.
  Var constant(Tensor value);
  Var constant_ref(const Tensor& value);
  Var variable(Tensor value);
  Var variable_ref(const Tensor& value);

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  // Same shapes, or `b` is 1-D and broadcast across the rows of 2-D `a`.
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  // Normalizes over the last axis; gamma and beta are 1-D of that length.
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  Var gelu(Var x);
  Var softmax(Var x, std::size_t axis);
  Var index_select(Var x, std::size_t axis, std::vector<std::size_t> indices);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var sum(Var x);
  // -log softmax(logits)[label] for 1-D or single-row logits.
  Var cross_entropy(Var logits, std::size_t label);

  // Column hooks on a 2-D tensor, touching only the listed rows of `col`.
  Var scale_column(Var x, std::size_t col, std::vector<std::size_t> rows, double factor);
  // Replaces x[rows, col] with `values` (1-D, one entry per row).
  Var overwrite_column(Var x, std::size_t col, std::vector<std::size_t> rows, Var values);
  // Adds the scalar `delta` to x[rows, col].
  Var shift_column(Var x, std::size_t col, std::vector<std::size_t> rows, Var delta);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient of the last backward() output; zeros for nodes it did not reach.
  Tensor grad(Var v) const;

  // Seeds d(output)/d(output) = 1 and sweeps the tape in reverse. Clears any
  // gradients from a previous sweep first.
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }

 private:
  using BackwardFn = std::function<void(Tape&, std::span<const double> out_grad)>;

  struct Node {
    std::shared_ptr<const Tensor> value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(std::shared_ptr<const Tensor> value, bool requires_grad, BackwardFn fn);
  Var push(Tensor value, bool requires_grad, BackwardFn fn);
  const Node& node(Var v) const;
  bool needs(std::size_t index) const { return nodes_[index].requires_grad; }
  std::span<double> grad_buffer(std::size_t index);

  std::vector<Node> nodes_;
};

}  // namespace npath
