#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "utc/ops.hpp"

namespace utc::ad {

/// Optional additive bias: bias[i, j, h] = table[buckets[i * Lk + j], h].
template <class T>
struct AttentionBias {
  Var<T> table;               // num_buckets x heads
  std::span<const int> buckets;  // Lq * Lk bucket ids
};

template <class T>
struct AttentionOptions {
  std::size_t heads = 1;
  bool causal = false;
  std::span<const std::uint8_t> key_mask;  // empty: all keys valid
  const AttentionBias<T>* bias = nullptr;
  Tensor<T>* probs_out = nullptr;  // filled with heads x (Lq*Lk) weights when set
};

/// Scaled dot-product multi-head attention over pre-projected q (Lq x H*dk),
/// k and v (Lk x H*dk). Masked or future keys get exactly zero weight.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionOptions<T>& opt) {
  auto* tp = common_tape({q, k, v});
  const std::size_t lq = q.rows(), lk = k.rows(), width = q.cols(), heads = opt.heads;
  if (k.cols() != width || v.cols() != width || v.rows() != lk) {
    throw ShapeError("attention: q " + detail::dims(lq, width) + ", k " + detail::dims(lk, k.cols()) +
                     ", v " + detail::dims(v.rows(), v.cols()) + " do not close");
  }
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  detail::require_mask("attention", opt.key_mask, lk);
  Var<T> table;
  std::vector<int> buckets;
  if (opt.bias) {
    table = opt.bias->table;
    if (table.tape() != tp) throw std::invalid_argument("attention: bias table on another tape");
    if (opt.bias->buckets.size() != lq * lk || table.cols() != heads) {
      throw ShapeError("attention: bias expects " + std::to_string(lq * lk) + " buckets and " +
                       std::to_string(heads) + " head columns");
    }
    buckets.assign(opt.bias->buckets.begin(), opt.bias->buckets.end());
  }
  const std::size_t dk = width / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dk));
  std::vector<std::uint8_t> allowed(lq * lk);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = 0; j < lk; ++j)
      allowed[i * lk + j] = (opt.key_mask.empty() || opt.key_mask[j]) && (!opt.causal || j <= i);

  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  std::vector<T> probs(heads * lq * lk, T(0));
  auto out = Tensor<T>::matrix(lq, width);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dk;
    T* ph = probs.data() + h * lq * lk;
    kernels::gemm(kernels::Op::N, kernels::Op::T, lq, lk, dk, qv.data.data() + off, width, kv.data.data() + off, width,
                  ph, lk);
    for (std::size_t i = 0; i < lq; ++i) {
      T* p = ph + i * lk;
      const std::uint8_t* ok = allowed.data() + i * lk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if (!ok[j]) continue;
        p[j] *= scl;
        if (!buckets.empty()) p[j] += table.value()(static_cast<std::size_t>(buckets[i * lk + j]), h);
        mx = std::max(mx, p[j]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) {
        std::fill(p, p + lk, T(0));
        continue;
      }
      T z = T(0);
      for (std::size_t j = 0; j < lk; ++j) z += (p[j] = ok[j] ? std::exp(p[j] - mx) : T(0));
      const T inv = T(1) / z;
      for (std::size_t j = 0; j < lk; ++j) p[j] *= inv;
    }
    kernels::gemm(kernels::Op::N, kernels::Op::N, lq, dk, lk, ph, lk, vv.data.data() + off, width,
                  out.data.data() + off, width);
  }
  if (opt.probs_out) *opt.probs_out = Tensor<T>({heads, lq * lk}, probs);

  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                  (table.valid() && table.requires_grad());
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  const std::size_t itab = table.valid() ? table.id() : 0;
  const bool has_bias = table.valid();
  return tp->push(
      "attention", std::move(out), rg,
      [tp, iq, ik, iv, itab, has_bias, lq, lk, width, heads, dk, scl, probs = std::move(probs),
       buckets = std::move(buckets)](std::size_t o) {
        using kernels::Op;
        const T* go = tp->node(o).grad.data();
        const T* qv = tp->node(iq).value.data.data();
        const T* kv = tp->node(ik).value.data.data();
        const T* vv = tp->node(iv).value.data.data();
        T* gq = tp->grad_buffer(iq);
        T* gk = tp->grad_buffer(ik);
        T* gv = tp->grad_buffer(iv);
        T* gt = has_bias ? tp->grad_buffer(itab) : nullptr;
        std::vector<T> ds(lq * lk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dk;
          const T* ph = probs.data() + h * lq * lk;
          if (gv) kernels::gemm(Op::T, Op::N, lk, dk, lq, ph, lk, go + off, width, gv + off, width);
          std::fill(ds.begin(), ds.end(), T(0));
          kernels::gemm(Op::N, Op::T, lq, lk, dk, go + off, width, vv + off, width, ds.data(), lk);
          for (std::size_t i = 0; i < lq; ++i) {
            const T* p = ph + i * lk;
            T* d = ds.data() + i * lk;
            T dot = T(0);
            for (std::size_t j = 0; j < lk; ++j) dot += p[j] * d[j];
            for (std::size_t j = 0; j < lk; ++j) {
              d[j] = p[j] * (d[j] - dot);
              if (gt && p[j] != T(0)) gt[static_cast<std::size_t>(buckets[i * lk + j]) * heads + h] += d[j];
              d[j] *= scl;
            }
          }
          if (gq) kernels::gemm(Op::N, Op::N, lq, dk, lk, ds.data(), lk, kv + off, width, gq + off, width);
          if (gk) kernels::gemm(Op::T, Op::N, lk, dk, lq, ds.data(), lk, qv + off, width, gk + off, width);
        }
      });
}

}  // namespace utc::ad
