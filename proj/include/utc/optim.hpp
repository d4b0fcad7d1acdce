#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "utc/params.hpp"

namespace utc::optim {

/// inverse_sqrt: 1 / sqrt(max(step, warmup)); constant: `base`. Steps count from 1.
inline double learning_rate(const std::string& schedule, std::size_t step, double base, std::size_t warmup) {
  if (schedule == "constant") return base;
  if (schedule == "inverse_sqrt") {
    return 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>({step, warmup, 1})));
  }
  throw std::invalid_argument("unknown learning-rate schedule " + schedule);
}

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// Adam over every parameter of a store, state keyed by name.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<T>& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : store) {
      auto& st = state_[name];
      if (st.m.size() != p.grad.size()) {
        st.m.assign(p.grad.size(), 0.0);
        st.v.assign(p.grad.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.grad.size(); ++i) {
        const double g = p.grad[i];
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double update = lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg_.eps);
        p.value.data[i] = static_cast<T>(static_cast<double>(p.value.data[i]) - update);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, State> state_;
};

/// Global L2 norm of all gradients.
template <class T>
double grad_norm(const ParamStore<T>& store) {
  double s = 0;
  for (const auto& [_, p] : store)
    for (T g : p.grad) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double n = grad_norm(store);
  if (max_norm > 0 && n > max_norm && std::isfinite(n)) {
    const T f = static_cast<T>(max_norm / n);
    for (auto& [_, p] : store)
      for (T& g : p.grad) g *= f;
  }
  return n;
}

}  // namespace utc::optim
