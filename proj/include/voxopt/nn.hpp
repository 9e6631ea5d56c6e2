#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxopt/rng.hpp"
#include "voxopt/tape.hpp"

namespace voxopt {

/// Ordered, named collection of trainable tensors. Order is the serialization
/// order, so construction must be deterministic.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ValidationError("duplicate parameter: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(init)});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return entries_[it->second].value;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return entries_[it->second].value;
  }

  std::size_t size() const { return entries_.size(); }
  Entry& entry(std::size_t i) { return entries_[i]; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Content hash over all parameter payloads, in declaration order.
/// Used to verify that a network stayed frozen across a training run.
template <typename T>
std::uint64_t parameter_hash(const ParamStore<T>& store) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    h = fnv1a64(e.name.data(), e.name.size(), h);
    h = fnv1a64(e.value.data(), sizeof(T) * static_cast<std::size_t>(e.value.numel()), h);
  }
  return h;
}

/// Tape leaves for every entry of a store, in order.
template <typename T>
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(Tape<T>& tape, const ParamStore<T>& store, bool requires_grad) {
    vars_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      vars_.push_back(tape.leaf(store.entry(i).value, requires_grad));
      index_[store.entry(i).name] = i;
    }
  }

  /// Bind pre-existing tape vars to a store's names, in declaration order.
  BoundParams(const ParamStore<T>& store, const std::vector<Var>& vars) : vars_(vars) {
    if (vars.size() != store.size()) throw ValidationError("bound var count mismatch");
    for (std::size_t i = 0; i < store.size(); ++i) index_[store.entry(i).name] = i;
  }

  Var operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return vars_[it->second];
  }
  const std::vector<Var>& vars() const { return vars_; }

 private:
  std::vector<Var> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradients for every bound parameter, zeros where none reached.
template <typename T>
std::vector<Tensor<T>> collect_grads(Tape<T>& tape, const BoundParams<T>& bp) {
  std::vector<Tensor<T>> out;
  out.reserve(bp.vars().size());
  for (Var v : bp.vars()) {
    if (tape.has_grad(v)) {
      out.push_back(tape.grad(v));
    } else {
      out.push_back(Tensor<T>::zeros(tape.val(v).shape()));
    }
  }
  return out;
}

template <typename T>
class Adam {
 public:
  Adam(T lr, T beta1, T beta2, T eps = T(1e-8)) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

  void step(ParamStore<T>& store, const std::vector<Tensor<T>>& grads) {
    if (grads.size() != store.size()) throw ValidationError("adam: gradient count mismatch");
    if (m_.empty()) {
      for (std::size_t i = 0; i < store.size(); ++i) {
        m_.push_back(Tensor<T>::zeros(store.entry(i).value.shape()));
        v_.push_back(Tensor<T>::zeros(store.entry(i).value.shape()));
      }
    }
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      Tensor<T>& p = store.entry(i).value;
      const Tensor<T>& g = grads[i];
      if (!p.same_shape(g)) throw ValidationError("adam: gradient shape mismatch for " + store.entry(i).name);
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  T lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

/// Plain gradient descent on a single latent vector, with a per-call rate.
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, T lr) {
  if (!param.same_shape(grad)) throw ValidationError("sgd: shape mismatch");
  for (std::int64_t i = 0; i < param.numel(); ++i) param[i] -= lr * grad[i];
}

/// Runtime weight scale for equalized-rate layers: gain / sqrt(fan_in).
template <typename T>
T wscale_for(std::int64_t fan_in, T gain = T(1)) {
  return gain / std::sqrt(static_cast<T>(fan_in));
}

template <typename T>
Tensor<T> randn_init(Rng& rng, std::vector<std::int64_t> shape) {
  return Tensor<T>::randn(std::move(shape), rng);
}

}  // namespace voxopt
