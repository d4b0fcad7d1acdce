#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "utc/autodiff.hpp"

namespace utc::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool finite = true;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tol) const { return finite && max_rel_error < tol; }
};

template <class T>
using GraphBuilder = std::function<Var<T>(Tape<T>&, std::span<const Var<T>>)>;

/// Compares reverse-mode gradients of a scalar graph against the five-point
/// central difference (error O(h^4)), coordinate by coordinate over every
/// tensor in `thetas`.
/// Error per coordinate: |a - cd| / max(|a|, |cd|, 1e-8). Non-finite values
/// are reported through `finite`, never thrown.
template <class T>
GradCheckResult grad_check(const GraphBuilder<T>& f, const std::vector<Tensor<T>>& thetas, T eps = T(1e-3)) {
  auto evaluate = [&](const std::vector<Tensor<T>>& th, bool with_grad,
                      std::vector<std::vector<T>>* grads) -> T {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    vars.reserve(th.size());
    for (const auto& t : th) vars.push_back(tape.leaf(t, with_grad));
    Var<T> loss = f(tape, vars);
    if (loss.value().size() != 1) throw ShapeError("grad_check: builder must return a scalar");
    if (with_grad) {
      tape.backward(loss);
      grads->clear();
      for (const auto& v : vars) {
        auto g = v.grad();
        if (g.empty()) g.assign(v.value().size(), T(0));
        grads->push_back(std::move(g));
      }
    }
    return loss.value().data[0];
  };

  GradCheckResult res;
  std::vector<std::vector<T>> analytic;
  const T base = evaluate(thetas, true, &analytic);
  if (!std::isfinite(static_cast<double>(base))) {
    res.finite = false;
    res.max_rel_error = std::numeric_limits<double>::infinity();
    return res;
  }
  std::vector<Tensor<T>> probe = thetas;
  for (std::size_t t = 0; t < thetas.size(); ++t) {
    for (std::size_t i = 0; i < thetas[t].size(); ++i) {
      const T orig = thetas[t].data[i];
      auto at = [&](T offset) {
        probe[t].data[i] = orig + offset;
        return static_cast<double>(evaluate(probe, false, nullptr));
      };
      const double f1 = at(eps), f_1 = at(-eps), f2 = at(2 * eps), f_2 = at(-2 * eps);
      probe[t].data[i] = orig;
      const double cd = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * static_cast<double>(eps));
      const double a = static_cast<double>(analytic[t][i]);
      if (!std::isfinite(cd) || !std::isfinite(a)) {
        res.finite = false;
        res.max_rel_error = std::numeric_limits<double>::infinity();
        res.worst_tensor = t;
        res.worst_index = i;
        return res;
      }
      const double err = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-8});
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_tensor = t;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = cd;
      }
    }
  }
  return res;
}

}  // namespace utc::ad
