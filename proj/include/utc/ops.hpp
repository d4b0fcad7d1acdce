#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "utc/autodiff.hpp"
#include "utc/kernels.hpp"

namespace utc {

/// Per-position validity flags; 0 marks padding.
using Mask = std::vector<std::uint8_t>;

}  // namespace utc

namespace utc::ad {

namespace detail {

inline std::string dims(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <class T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.value().shape != b.value().shape) {
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a.value().shape) + " vs " +
                     shape_str(b.value().shape));
  }
}

inline void require_mask(const char* op, std::span<const std::uint8_t> mask, std::size_t rows) {
  if (!mask.empty() && mask.size() != rows) {
    throw ShapeError(std::string(op) + ": mask length " + std::to_string(mask.size()) +
                     " does not match " + std::to_string(rows) + " rows");
  }
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto* tp = common_tape({a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: lhs is " + detail::dims(m, k) + " but rhs is " +
                     detail::dims(bv.rows(), n) + " (inner " + std::to_string(k) +
                     " != " + std::to_string(bv.rows()) + ")");
  }
  auto out = Tensor<T>::matrix(m, n);
  kernels::gemm_nn(m, n, k, av.data.data(), bv.data.data(), out.data.data());
  const auto ia = a.id(), ib = b.id();
  return tp->push("matmul", std::move(out), a.requires_grad() || b.requires_grad(),
                  [tp, ia, ib, m, n, k](std::size_t o) {
                    const T* go = tp->node(o).grad.data();
                    if (T* ga = tp->grad_buffer(ia)) {
                      kernels::gemm_nt(m, k, n, go, tp->node(ib).value.data.data(), ga);
                    }
                    if (T* gb = tp->grad_buffer(ib)) {
                      kernels::gemm_tn(k, n, m, tp->node(ia).value.data.data(), go, gb);
                    }
                  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto* tp = common_tape({a, b});
  detail::require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return tp->push("add", std::move(out), a.requires_grad() || b.requires_grad(),
                  [tp, ia, ib](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    for (auto id : {ia, ib}) {
                      if (T* g = tp->grad_buffer(id)) {
                        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
                      }
                    }
                  });
}

/// a (m x n) + broadcast row b (1 x n).
template <class T>
Var<T> add_row(Var<T> a, Var<T> b) {
  auto* tp = common_tape({a, b});
  const std::size_t m = a.rows(), n = a.cols();
  if (b.rows() != 1 || b.cols() != n) {
    throw ShapeError("add_row: expected bias 1x" + std::to_string(n) + ", got " +
                     detail::dims(b.rows(), b.cols()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += bv[j];
  const auto ia = a.id(), ib = b.id();
  return tp->push("add_row", std::move(out), a.requires_grad() || b.requires_grad(),
                  [tp, ia, ib, m, n](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    if (T* ga = tp->grad_buffer(ia)) {
                      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                    }
                    if (T* gb = tp->grad_buffer(ib)) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
                    }
                  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto* tp = common_tape({a, b});
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return tp->push("mul", std::move(out), a.requires_grad() || b.requires_grad(),
                  [tp, ia, ib](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    if (T* ga = tp->grad_buffer(ia)) {
                      const auto& bv = tp->node(ib).value.data;
                      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
                    }
                    if (T* gb = tp->grad_buffer(ib)) {
                      const auto& av = tp->node(ia).value.data;
                      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
                    }
                  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  auto* tp = a.tape();
  Tensor<T> out = a.value();
  for (auto& x : out.data) x *= s;
  const auto ia = a.id();
  return tp->push("scale", std::move(out), a.requires_grad(), [tp, ia, s](std::size_t o) {
    const auto& go = tp->node(o).grad;
    T* ga = tp->grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  auto* tp = a.tape();
  T acc = T(0);
  for (auto x : a.value().data) acc += x;
  const auto ia = a.id();
  return tp->push("sum", Tensor<T>::scalar(acc), a.requires_grad(), [tp, ia](std::size_t o) {
    const T go = tp->node(o).grad[0];
    T* ga = tp->grad_buffer(ia);
    const std::size_t n = tp->node(ia).value.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += go;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// ---------------------------------------------------------------------------
// Row/column plumbing

/// Rows of `table` selected by `ids`; rows where mask is 0 are zero vectors.
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids, std::span<const std::uint8_t> mask = {}) {
  auto* tp = table.tape();
  const std::size_t vocab = table.rows(), d = table.cols();
  detail::require_mask("gather_rows", mask, ids.size());
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  std::vector<int> idv(ids.begin(), ids.end());
  Mask mk(mask.begin(), mask.end());
  auto out = Tensor<T>::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!mk.empty() && !mk[i]) continue;
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " at position " +
                              std::to_string(i) + " outside table of " + std::to_string(vocab) +
                              " rows");
    }
    std::copy_n(table.value().row(ids[i]), d, out.row(i));
  }
  const auto it = table.id();
  return tp->push("gather_rows", std::move(out), table.requires_grad(),
                  [tp, it, idv = std::move(idv), mk = std::move(mk), d](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    T* gt = tp->grad_buffer(it);
                    for (std::size_t i = 0; i < idv.size(); ++i) {
                      if (!mk.empty() && !mk[i]) continue;
                      T* dst = gt + static_cast<std::size_t>(idv[i]) * d;
                      for (std::size_t j = 0; j < d; ++j) dst[j] += go[i * d + j];
                    }
                  });
}

template <class T>
Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
  auto* tp = a.tape();
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > m) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + std::to_string(m));
  }
  auto out = Tensor<T>::matrix(count, n);
  std::copy_n(a.value().row(start), count * n, out.data.data());
  const auto ia = a.id();
  return tp->push("slice_rows", std::move(out), a.requires_grad(),
                  [tp, ia, start, n](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    T* ga = tp->grad_buffer(ia) + start * n;
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                  });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t count) {
  auto* tp = a.tape();
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " + std::to_string(n));
  }
  auto out = Tensor<T>::matrix(m, count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(a.value().row(i) + start, count, out.row(i));
  const auto ia = a.id();
  return tp->push("slice_cols", std::move(out), a.requires_grad(),
                  [tp, ia, start, count, m, n](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    T* ga = tp->grad_buffer(ia);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += go[i * count + j];
                  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  auto* tp = parts.front().tape();
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape() != tp) throw std::invalid_argument("concat_cols: operands on different tapes");
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row counts differ, " + std::to_string(m) + " vs " +
                       std::to_string(p.rows()));
    }
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  auto out = Tensor<T>::matrix(m, total);
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, cols)
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.value().row(i), c, out.row(i) + off);
    spans.emplace_back(p.id(), c);
    off += c;
  }
  return tp->push("concat_cols", std::move(out), rg,
                  [tp, spans = std::move(spans), m, total](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    std::size_t off = 0;
                    for (auto [id, c] : spans) {
                      if (T* g = tp->grad_buffer(id)) {
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += go[i * total + off + j];
                      }
                      off += c;
                    }
                  });
}

/// y[i, j] = x[i, j] * c[i]   with c of shape m x 1.
template <class T>
Var<T> scale_rows(Var<T> x, Var<T> c) {
  auto* tp = common_tape({x, c});
  const std::size_t m = x.rows(), n = x.cols();
  if (c.rows() != m || c.cols() != 1) {
    throw ShapeError("scale_rows: expected " + detail::dims(m, 1) + " weights, got " +
                     detail::dims(c.rows(), c.cols()));
  }
  Tensor<T> out = x.value();
  const auto& cv = c.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= cv[i];
  const auto ix = x.id(), ic = c.id();
  return tp->push("scale_rows", std::move(out), x.requires_grad() || c.requires_grad(),
                  [tp, ix, ic, m, n](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    if (T* gx = tp->grad_buffer(ix)) {
                      const auto& cv = tp->node(ic).value.data;
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i * n + j] * cv[i];
                    }
                    if (T* gc = tp->grad_buffer(ic)) {
                      const auto& xv = tp->node(ix).value.data;
                      for (std::size_t i = 0; i < m; ++i) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * xv[i * n + j];
                        gc[i] += acc;
                      }
                    }
                  });
}

/// Zeroes rows whose mask entry is 0.
template <class T>
Var<T> mask_rows(Var<T> x, std::span<const std::uint8_t> mask) {
  auto* tp = x.tape();
  const std::size_t m = x.rows(), n = x.cols();
  detail::require_mask("mask_rows", mask, m);
  if (mask.empty()) return x;
  Mask mk(mask.begin(), mask.end());
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < m; ++i)
    if (!mk[i]) std::fill_n(out.row(i), n, T(0));
  const auto ix = x.id();
  return tp->push("mask_rows", std::move(out), x.requires_grad(),
                  [tp, ix, mk = std::move(mk), n](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    T* gx = tp->grad_buffer(ix);
                    for (std::size_t i = 0; i < mk.size(); ++i)
                      if (mk[i])
                        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i * n + j];
                  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

/// Row-wise softmax.
template <class T>
Var<T> softmax_rows(Var<T> a) {
  auto* tp = a.tape();
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    T* r = out.row(i);
    const T mx = *std::max_element(r, r + n);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) z += (r[j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < n; ++j) r[j] /= z;
  }
  const auto ia = a.id();
  return tp->push("softmax_rows", std::move(out), a.requires_grad(), [tp, ia, m, n](std::size_t o) {
    const auto& go = tp->node(o).grad;
    const auto& y = tp->node(o).value.data;
    T* ga = tp->grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (go[i * n + j] - dot);
    }
  });
}

/// Exact (erf) GeLU.
template <class T>
Var<T> gelu(Var<T> a) {
  auto* tp = a.tape();
  Tensor<T> out = a.value();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (auto& x : out.data) x = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  const auto ia = a.id();
  return tp->push("gelu", std::move(out), a.requires_grad(), [tp, ia, inv_sqrt2](std::size_t o) {
    const auto& go = tp->node(o).grad;
    const auto& x = tp->node(ia).value.data;
    T* ga = tp->grad_buffer(ia);
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += go[i] * (cdf + x[i] * pdf);
    }
  });
}

template <class T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  auto* tp = a.tape();
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = stable_sigmoid(x);
  const auto ia = a.id();
  return tp->push("sigmoid", std::move(out), a.requires_grad(), [tp, ia](std::size_t o) {
    const auto& go = tp->node(o).grad;
    const auto& y = tp->node(o).value.data;
    T* ga = tp->grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (T(1) - y[i]);
  });
}

/// Row-wise RMS normalization with a learned gain (1 x n).
template <class T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps = T(1e-6)) {
  auto* tp = common_tape({x, gain});
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n) {
    throw ShapeError("rms_norm: expected gain 1x" + std::to_string(n) + ", got " +
                     detail::dims(gain.rows(), gain.cols()));
  }
  std::vector<T> inv(m);
  Tensor<T> out = x.value();
  const auto& g = gain.value().data;
  for (std::size_t i = 0; i < m; ++i) {
    T* r = out.row(i);
    T ss = T(0);
    for (std::size_t j = 0; j < n; ++j) ss += r[j] * r[j];
    inv[i] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) r[j] *= inv[i] * g[j];
  }
  const auto ix = x.id(), ig = gain.id();
  return tp->push("rms_norm", std::move(out), x.requires_grad() || gain.requires_grad(),
                  [tp, ix, ig, m, n, inv = std::move(inv)](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    const auto& xv = tp->node(ix).value.data;
                    const auto& g = tp->node(ig).value.data;
                    if (T* gg = tp->grad_buffer(ig)) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * xv[i * n + j] * inv[i];
                    }
                    if (T* gx = tp->grad_buffer(ix)) {
                      for (std::size_t i = 0; i < m; ++i) {
                        T dot = T(0);
                        for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * g[j] * xv[i * n + j];
                        const T r = inv[i];
                        const T c = r * r * r * dot / static_cast<T>(n);
                        for (std::size_t j = 0; j < n; ++j)
                          gx[i * n + j] += r * g[j] * go[i * n + j] - c * xv[i * n + j];
                      }
                    }
                  });
}

/// Inverted dropout. Identity when rate is 0.
template <class T, class Rng>
Var<T> dropout(Var<T> x, T rate, Rng& rng) {
  if (rate <= T(0)) return x;
  if (rate >= T(1)) throw std::invalid_argument("dropout: rate must be below 1");
  auto* tp = x.tape();
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T s = T(1) / (T(1) - rate);
  std::vector<T> factor(x.value().size());
  for (auto& f : factor) f = keep(rng) ? s : T(0);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= factor[i];
  const auto ix = x.id();
  return tp->push("dropout", std::move(out), x.requires_grad(),
                  [tp, ix, factor = std::move(factor)](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    T* gx = tp->grad_buffer(ix);
                    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor[i];
                  });
}

// ---------------------------------------------------------------------------
// Sequence primitives

/// Depthwise 1-D convolution with symmetric zero padding so the output keeps
/// the input length. `kernel` is width x d; tap t reads row i + t - width/2.
template <class T>
Var<T> conv1d_same(Var<T> x, Var<T> kernel) {
  auto* tp = common_tape({x, kernel});
  const std::size_t len = x.rows(), d = x.cols(), w = kernel.rows();
  if (kernel.cols() != d) {
    throw ShapeError("conv1d_same: kernel is " + detail::dims(w, kernel.cols()) +
                     " but input has " + std::to_string(d) + " channels");
  }
  if (w % 2 == 0) {
    throw std::invalid_argument("conv1d_same: width " + std::to_string(w) +
                                " is even; only odd widths have symmetric same-padding");
  }
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(w / 2);
  const std::ptrdiff_t L = static_cast<std::ptrdiff_t>(len);
  auto out = Tensor<T>::matrix(len, d);
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  for (std::ptrdiff_t i = 0; i < L; ++i) {
    T* orow = out.row(static_cast<std::size_t>(i));
    for (std::size_t t = 0; t < w; ++t) {
      const std::ptrdiff_t src = i + static_cast<std::ptrdiff_t>(t) - half;
      if (src < 0 || src >= L) continue;
      const T* xr = xv.row(static_cast<std::size_t>(src));
      const T* kr = kv.row(t);
      for (std::size_t c = 0; c < d; ++c) orow[c] += kr[c] * xr[c];
    }
  }
  const auto ix = x.id(), ik = kernel.id();
  return tp->push("conv1d_same", std::move(out), x.requires_grad() || kernel.requires_grad(),
                  [tp, ix, ik, L, d, w, half](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    const auto& xv = tp->node(ix).value;
                    const auto& kv = tp->node(ik).value;
                    T* gx = tp->grad_buffer(ix);
                    T* gk = tp->grad_buffer(ik);
                    for (std::ptrdiff_t i = 0; i < L; ++i) {
                      const T* g = go.data() + static_cast<std::size_t>(i) * d;
                      for (std::size_t t = 0; t < w; ++t) {
                        const std::ptrdiff_t src = i + static_cast<std::ptrdiff_t>(t) - half;
                        if (src < 0 || src >= L) continue;
                        const auto s = static_cast<std::size_t>(src);
                        if (gx) {
                          const T* kr = kv.row(t);
                          for (std::size_t c = 0; c < d; ++c) gx[s * d + c] += g[c] * kr[c];
                        }
                        if (gk) {
                          const T* xr = xv.row(s);
                          for (std::size_t c = 0; c < d; ++c) gk[t * d + c] += g[c] * xr[c];
                        }
                      }
                    }
                  });
}

/// Window validity after strided pooling: a pooled row is valid when any of
/// its source rows is.
inline Mask pool_mask(std::span<const std::uint8_t> mask, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("pool_mask: stride must be positive");
  Mask out(detail::ceil_div(mask.size(), stride), 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[i / stride] = 1;
  return out;
}

/// Non-overlapping mean pooling with window = stride = b. Output row j is the
/// mean of rows jb .. min((j+1)b, L)-1. With a mask, only valid rows count
/// toward the mean and a window with no valid row yields zeros.
template <class T>
Var<T> strided_mean_pool(Var<T> x, std::size_t b, std::span<const std::uint8_t> mask = {}) {
  if (b == 0) throw std::invalid_argument("strided_mean_pool: stride must be positive");
  auto* tp = x.tape();
  const std::size_t len = x.rows(), d = x.cols();
  detail::require_mask("strided_mean_pool", mask, len);
  const std::size_t out_len = detail::ceil_div(len, b);
  // Per-source-row weight: 1/count of contributing rows in its window.
  std::vector<T> weight(len, T(0));
  std::vector<T> count(out_len, T(0));
  for (std::size_t i = 0; i < len; ++i)
    if (mask.empty() || mask[i]) count[i / b] += T(1);
  for (std::size_t i = 0; i < len; ++i)
    if (mask.empty() || mask[i]) weight[i] = T(1) / count[i / b];
  // Forward sums first and divides once so constant windows pool exactly.
  auto out = Tensor<T>::matrix(out_len, d);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < len; ++i) {
    if (weight[i] == T(0)) continue;
    T* orow = out.row(i / b);
    const T* xr = xv.row(i);
    for (std::size_t c = 0; c < d; ++c) orow[c] += xr[c];
  }
  for (std::size_t j = 0; j < out_len; ++j)
    if (count[j] > T(0))
      for (std::size_t c = 0; c < d; ++c) out(j, c) /= count[j];
  const auto ix = x.id();
  return tp->push("strided_mean_pool", std::move(out), x.requires_grad(),
                  [tp, ix, b, d, weight = std::move(weight)](std::size_t o) {
                    const auto& go = tp->node(o).grad;
                    T* gx = tp->grad_buffer(ix);
                    for (std::size_t i = 0; i < weight.size(); ++i) {
                      if (weight[i] == T(0)) continue;
                      const T* g = go.data() + (i / b) * d;
                      for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += weight[i] * g[c];
                    }
                  });
}

/// Repetition upsampling: output row i is input row i / b, for i < len.
template <class T>
Var<T> repeat_rows(Var<T> x, std::size_t b, std::size_t len) {
  if (b == 0) throw std::invalid_argument("repeat_rows: factor must be positive");
  auto* tp = x.tape();
  const std::size_t n = x.rows(), d = x.cols();
  if (detail::ceil_div(len, b) != n) {
    throw ShapeError("repeat_rows: " + std::to_string(n) + " rows cannot cover length " +
                     std::to_string(len) + " at factor " + std::to_string(b));
  }
  auto out = Tensor<T>::matrix(len, d);
  for (std::size_t i = 0; i < len; ++i) std::copy_n(x.value().row(i / b), d, out.row(i));
  const auto ix = x.id();
  return tp->push("repeat_rows", std::move(out), x.requires_grad(), [tp, ix, b, d, len](std::size_t o) {
    const auto& go = tp->node(o).grad;
    T* gx = tp->grad_buffer(ix);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t c = 0; c < d; ++c) gx[(i / b) * d + c] += go[i * d + c];
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over positions with mask != 0 of -log softmax(logits[i])[target[i]].
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask = {}) {
  auto* tp = logits.tape();
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(m) + " rows");
  }
  detail::require_mask("softmax_cross_entropy", mask, m);
  std::vector<T> prob(m * v);
  std::vector<int> tgt(targets.begin(), targets.end());
  Mask mk(mask.begin(), mask.end());
  std::size_t count = 0;
  T total = T(0);
  const auto& lv = logits.value();
  for (std::size_t i = 0; i < m; ++i) {
    if (!mk.empty() && !mk[i]) continue;
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= v) {
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(tgt[i]) +
                              " outside " + std::to_string(v) + " classes");
    }
    const T* r = lv.row(i);
    const T mx = *std::max_element(r, r + v);
    T z = T(0);
    for (std::size_t j = 0; j < v; ++j) z += (prob[i * v + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < v; ++j) prob[i * v + j] /= z;
    total += -(r[tgt[i]] - mx - std::log(z));
    ++count;
  }
  if (count == 0) throw std::invalid_argument("softmax_cross_entropy: no unmasked positions");
  const T inv = T(1) / static_cast<T>(count);
  const auto il = logits.id();
  return tp->push("softmax_cross_entropy", Tensor<T>::scalar(total * inv), logits.requires_grad(),
                  [tp, il, v, inv, prob = std::move(prob), tgt = std::move(tgt),
                   mk = std::move(mk)](std::size_t o) {
                    const T go = tp->node(o).grad[0] * inv;
                    T* gl = tp->grad_buffer(il);
                    for (std::size_t i = 0; i < tgt.size(); ++i) {
                      if (!mk.empty() && !mk[i]) continue;
                      for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += go * prob[i * v + j];
                      gl[i * v + static_cast<std::size_t>(tgt[i])] -= go;
                    }
                  });
}

/// Mean over present entries of the sigmoid cross entropy between logits
/// (1 x k) and soft labels in [0, 1], in the overflow-free logit form
/// max(z, 0) - z*y + log(1 + exp(-|z|)).
template <class T>
Var<T> sigmoid_bce(Var<T> logits, std::span<const T> labels, std::span<const std::uint8_t> present = {}) {
  auto* tp = logits.tape();
  const std::size_t k = logits.value().size();
  if (labels.size() != k) {
    throw ShapeError("sigmoid_bce: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(k) + " logits");
  }
  detail::require_mask("sigmoid_bce", present, k);
  std::vector<T> y(labels.begin(), labels.end());
  Mask pr(present.begin(), present.end());
  if (pr.empty()) pr.assign(k, 1);
  T total = T(0);
  std::size_t count = 0;
  const auto& z = logits.value().data;
  for (std::size_t i = 0; i < k; ++i) {
    if (!pr[i]) continue;
    if (!(y[i] >= T(0) && y[i] <= T(1))) {
      throw std::invalid_argument("sigmoid_bce: label " + std::to_string(static_cast<double>(y[i])) +
                                  " outside [0, 1]");
    }
    total += std::max(z[i], T(0)) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
    ++count;
  }
  if (count == 0) throw std::invalid_argument("sigmoid_bce: no labels present");
  const T inv = T(1) / static_cast<T>(count);
  const auto il = logits.id();
  return tp->push("sigmoid_bce", Tensor<T>::scalar(total * inv), logits.requires_grad(),
                  [tp, il, inv, y = std::move(y), pr = std::move(pr)](std::size_t o) {
                    const T go = tp->node(o).grad[0] * inv;
                    const auto& z = tp->node(il).value.data;
                    T* gl = tp->grad_buffer(il);
                    for (std::size_t i = 0; i < y.size(); ++i)
                      if (pr[i]) gl[i] += go * (stable_sigmoid(z[i]) - y[i]);
                  });
}

}  // namespace utc::ad
