#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace utc {

/// Raised when operand shapes do not satisfy a primitive's signature. The
/// message names the offending dimensions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  if (s.empty()) os << "scalar";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. All model primitives operate on rank-2 tensors;
/// scalars are 1x1.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {
    check_extents();
  }
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_extents();
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor scalar(T v) { return Tensor({1, 1}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const {
    require_rank2();
    return shape[0];
  }
  std::size_t cols() const {
    require_rank2();
    return shape[1];
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
  T* row(std::size_t r) { return data.data() + r * shape[1]; }
  const T* row(std::size_t r) const { return data.data() + r * shape[1]; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  void require_rank2() const {
    if (shape.size() != 2) throw ShapeError("expected a rank-2 tensor, got " + shape_str(shape));
  }

 private:
  void check_extents() const {
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
  }
};

}  // namespace utc
