#pragma once

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "utc/autodiff.hpp"
#include "utc/rng.hpp"

namespace utc {

template <class T>
struct Parameter {
  Tensor<T> value;
  std::vector<T> grad;  // same length as value, accumulated across tapes
};

/// Named parameters in a stable (lexicographic) order.
template <class T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    Parameter<T> p;
    p.grad.assign(value.size(), T(0));
    p.value = std::move(value);
    params_.emplace(name, std::move(p));
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  void erase_prefix(const std::string& prefix) {
    for (auto it = params_.begin(); it != params_.end();) {
      if (it->first.rfind(prefix, 0) == 0) it = params_.erase(it);
      else ++it;
    }
  }
  void zero_grad() {
    for (auto& [_, p] : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter<T>> params_;
};

/// Lazily records parameters as tape leaves. After backward, pushes leaf
/// gradients back into the store.
template <class T>
class Binding {
 public:
  Binding(ad::Tape<T>& tape, const ParamStore<T>& store, bool trainable)
      : tape_(tape), store_(store), trainable_(trainable) {}

  ad::Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    auto v = tape_.leaf(store_.at(name).value, trainable_);
    vars_.emplace(name, v);
    return v;
  }
  /// Uses `v` for `name` instead of a fresh leaf.
  void bind(const std::string& name, ad::Var<T> v) { vars_[name] = v; }
  bool has(const std::string& name) const { return store_.contains(name); }
  ad::Tape<T>& tape() { return tape_; }

  void accumulate_into(ParamStore<T>& store, T factor = T(1)) const {
    for (const auto& [name, v] : vars_) {
      const auto& g = v.grad();
      if (g.empty()) continue;
      auto& dst = store.at(name).grad;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
    }
  }

 private:
  ad::Tape<T>& tape_;
  const ParamStore<T>& store_;
  bool trainable_;
  std::map<std::string, ad::Var<T>> vars_;
};

namespace init {

template <class T>
Tensor<T> normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  auto t = Tensor<T>::matrix(rows, cols);
  for (auto& x : t.data) x = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> fan_in(std::size_t rows, std::size_t cols, Rng& rng) {
  return normal<T>(rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)), rng);
}

}  // namespace init

}  // namespace utc
