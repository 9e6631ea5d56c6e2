#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "voxopt/tensor.hpp"

namespace voxopt {

/// Handle into a Tape. Only meaningful for the tape that produced it.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so replaying backward functions from the loss node down to zero visits a
/// valid reverse topological order. Values stay alive for the lifetime of
/// the tape; one tape corresponds to one forward/backward pass.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, nullptr});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Record an op result. `inputs` determines gradient requirements; the
  /// backward closure is dropped entirely when no input needs gradients.
  /// Invalid handles (optional inputs, e.g. a missing bias) are skipped.
  Var emit(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn bw) {
    bool rg = false;
    for (Var v : inputs) rg = rg || (v.valid() && requires_grad(v));
    nodes_.push_back(Node{std::move(value), Tensor<T>(), rg, rg ? std::move(bw) : nullptr});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& val(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient accumulated for `v` so far; zeros if nothing reached it yet.
  const Tensor<T>& grad(Var v) {
    Node& n = node(v);
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return node(v).grad.numel() != 0; }

  void accum_grad(Var v, const Tensor<T>& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.numel() == 0) {
      n.grad = g;
    } else {
      n.grad.add_scaled(g, T(1));
    }
  }

  /// Reverse pass from a scalar root. Clears previous gradients.
  void backward(Var root) {
    if (node(root).value.numel() != 1) {
      throw ValidationError("backward root must be a scalar");
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    node(root).grad = Tensor<T>::scalar(T(1));
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.numel() != 0) n.backward(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    BackwardFn backward;
  };

  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }

  std::vector<Node> nodes_;
};

}  // namespace voxopt
