#pragma once

#include <random>

#include "utc/tensor.hpp"

namespace utc::testing {

template <class T = double>
Tensor<T> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  auto t = Tensor<T>::matrix(r, c);
  for (auto& x : t.data) x = static_cast<T>(n(rng));
  return t;
}

template <class T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i] - b[i])));
  return a.size() == b.size() ? m : 1e300;
}

}  // namespace utc::testing
