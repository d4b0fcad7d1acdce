#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "utc/byte_frontend.hpp"
#include "utc/ops.hpp"

// Gradient-based subword tokenization: candidate blocks of size 1..M are
// formed by strided mean pooling over a convolved byte sequence, scored by a
// shared linear map, softmax-weighted per position and mean-pooled down by
// the downsampling rate.
namespace utc::gbst {

struct GbstConfig {
  std::size_t max_block = 4;   // M
  std::size_t conv_width = 5;  // widest pre-pooling convolution
  std::size_t downsample = 2;  // d_s
  std::size_t d_model = 64;

  void validate() const {
    if (max_block < 1) throw std::invalid_argument("gbst: max_block must be >= 1");
    if (downsample < 1) throw std::invalid_argument("gbst: downsample rate must be >= 1");
    if (conv_width % 2 == 0) throw std::invalid_argument("gbst: conv_width must be odd");
    if (d_model < 1) throw std::invalid_argument("gbst: d_model must be >= 1");
  }

  /// Convolution width for block size b: b + 1 rounded up to odd, capped at
  /// conv_width.
  std::size_t conv_width_for(std::size_t b) const {
    std::size_t w = b + 1;
    if (w % 2 == 0) ++w;
    return std::min(w, conv_width);
  }
};

template <class T>
struct GbstParams {
  std::vector<ad::Var<T>> conv;  // per block size b = 1..M: conv_width_for(b) x d_model
  ad::Var<T> score;              // d_model x 1, shared across block sizes
};

template <class T>
struct BlockCandidateSet {
  std::vector<ad::Var<T>> blocks;  // per b: L x d_model after repetition upsampling
  ad::Var<T> scores;               // L x M raw block scores p_{b,i}
  Mask mask;
};

template <class T>
struct LatentSubwordSequence {
  ad::Var<T> x;  // ceil(L / d_s) x d_model
  Mask mask;
};

template <class T>
BlockCandidateSet<T> enumerate_blocks(const EmbeddedByteSequence<T>& input, const GbstConfig& cfg,
                                      const GbstParams<T>& params) {
  cfg.validate();
  if (params.conv.size() != cfg.max_block) {
    throw ShapeError("gbst: expected " + std::to_string(cfg.max_block) + " convolution kernels, got " +
                     std::to_string(params.conv.size()));
  }
  const std::size_t len = input.x.rows();
  BlockCandidateSet<T> out;
  out.mask = input.mask;
  std::vector<ad::Var<T>> score_cols;
  for (std::size_t b = 1; b <= cfg.max_block; ++b) {
    auto conv = ad::mask_rows(ad::conv1d_same(input.x, params.conv[b - 1]), input.mask);
    auto pooled = ad::strided_mean_pool(conv, b, input.mask);
    auto scores = ad::matmul(pooled, params.score);
    out.blocks.push_back(ad::repeat_rows(pooled, b, len));
    score_cols.push_back(ad::repeat_rows(scores, b, len));
  }
  out.scores = ad::concat_cols(score_cols);
  return out;
}

template <class T>
struct Composition {
  ad::Var<T> x;        // L x d_model
  ad::Var<T> weights;  // L x M, each row on the probability simplex
};

template <class T>
Composition<T> compose(const BlockCandidateSet<T>& cands) {
  const std::size_t m = cands.blocks.size();
  if (m == 0 || cands.scores.cols() != m) throw ShapeError("gbst compose: malformed candidate set");
  auto weights = ad::softmax_rows(cands.scores);
  ad::Var<T> acc = ad::scale_rows(cands.blocks[0], ad::slice_cols(weights, 0, 1));
  for (std::size_t b = 1; b < m; ++b) acc = ad::add(acc, ad::scale_rows(cands.blocks[b], ad::slice_cols(weights, b, 1)));
  return {acc, weights};
}

template <class T>
LatentSubwordSequence<T> downsample(ad::Var<T> composed, std::size_t rate, const Mask& mask) {
  if (rate < 1) throw std::invalid_argument("gbst downsample: rate must be >= 1");
  return {ad::strided_mean_pool(composed, rate, mask), ad::pool_mask(mask, rate)};
}

template <class T>
LatentSubwordSequence<T> gbst_forward(const EmbeddedByteSequence<T>& input, const GbstConfig& cfg,
                                      const GbstParams<T>& params) {
  auto cands = enumerate_blocks(input, cfg, params);
  auto composed = compose(cands);
  return downsample(composed.x, cfg.downsample, input.mask);
}

}  // namespace utc::gbst
