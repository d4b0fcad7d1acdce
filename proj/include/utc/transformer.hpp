#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "utc/attention.hpp"
#include "utc/byte_frontend.hpp"
#include "utc/params.hpp"

namespace utc::transformer {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t d_kv = 16;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 2;  // 0: encoder-only
  double dropout_rate = 0.0;
  int rel_bias_buckets = 32;
  int rel_bias_max_distance = 128;
  std::size_t vocab_size = kByteVocabSize + 32;  // bytes, specials, sentinels

  std::size_t inner() const { return d_kv * n_heads; }

  void validate() const {
    if (d_model == 0 || d_ff == 0 || d_kv == 0 || n_heads == 0) {
      throw std::invalid_argument("model config: dimensions must be positive");
    }
    if (rel_bias_buckets < 2) throw std::invalid_argument("model config: need at least 2 bias buckets");
    if (rel_bias_max_distance < 1) throw std::invalid_argument("model config: max distance must be positive");
    if (vocab_size < static_cast<std::size_t>(kByteVocabSize)) {
      throw std::invalid_argument("model config: vocabulary smaller than the byte vocabulary");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::invalid_argument("model config: dropout in [0, 1)");
  }
};

/// Log-bucketed relative position, `relative` = key - query. Small offsets
/// get exact buckets, larger ones logarithmic buckets up to max_distance,
/// clamped beyond. Bidirectional splits buckets between the two signs;
/// unidirectional maps every future offset to bucket 0.
inline int relative_position_bucket(long relative, bool bidirectional, int num_buckets, int max_distance) {
  int ret = 0;
  long n = -relative;
  if (bidirectional) {
    num_buckets /= 2;
    if (n < 0) ret += num_buckets;
    n = std::labs(n);
  } else {
    n = std::max(n, 0L);
  }
  const int max_exact = num_buckets / 2;
  if (n < max_exact) return ret + static_cast<int>(n);
  const double ratio = std::log(static_cast<double>(n) / max_exact) /
                       std::log(static_cast<double>(max_distance) / max_exact);
  const int large = max_exact + static_cast<int>(ratio * (num_buckets - max_exact));
  return ret + std::min(large, num_buckets - 1);
}

inline std::vector<int> bucket_matrix(std::size_t lq, std::size_t lk, bool bidirectional, int buckets,
                                      int max_distance) {
  std::vector<int> out(lq * lk);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = 0; j < lk; ++j)
      out[i * lk + j] = relative_position_bucket(static_cast<long>(j) - static_cast<long>(i), bidirectional,
                                                 buckets, max_distance);
  return out;
}

/// Materialized bias, heads x (Lq * Lk), from a buckets x heads table.
template <class T>
Tensor<T> relative_position_bias(std::size_t lq, std::size_t lk, int buckets, int max_distance,
                                 const Tensor<T>& table, bool bidirectional = true) {
  if (buckets < 2) throw std::invalid_argument("relative_position_bias: need at least 2 buckets");
  if (table.rows() != static_cast<std::size_t>(buckets)) {
    throw ShapeError("relative_position_bias: table has " + std::to_string(table.rows()) + " rows for " +
                     std::to_string(buckets) + " buckets");
  }
  const auto idx = bucket_matrix(lq, lk, bidirectional, buckets, max_distance);
  const std::size_t heads = table.cols();
  Tensor<T> out({heads, lq * lk});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t p = 0; p < lq * lk; ++p) out(h, p) = table(static_cast<std::size_t>(idx[p]), h);
  return out;
}

template <class T>
struct ForwardContext {
  bool training = false;
  T dropout = T(0);
  Rng* rng = nullptr;
  // When set, attention weights of every self-attention layer are appended.
  std::vector<Tensor<T>>* attention_probs = nullptr;

  ad::Var<T> drop(ad::Var<T> x) {
    if (!training || dropout <= T(0)) return x;
    if (!rng) throw std::logic_error("dropout requested without an rng");
    return ad::dropout(x, dropout, *rng);
  }
};

template <class T>
struct EncoderOutput {
  ad::Var<T> y;  // L' x d_model
  Mask mask;
};

inline std::string layer_name(const char* stack, std::size_t l, const char* leaf) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s.%02zu.%s", stack, l, leaf);
  return buf;
}

template <class T>
void add_encoder_params(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model, inner = cfg.inner();
  store.add("enc.rel_bias", init::normal<T>(static_cast<std::size_t>(cfg.rel_bias_buckets), cfg.n_heads, 0.1, rng));
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    store.add(layer_name("enc", l, "attn_norm"), Tensor<T>::matrix(1, d, T(1)));
    store.add(layer_name("enc", l, "wq"), init::fan_in<T>(d, inner, rng));
    store.add(layer_name("enc", l, "wk"), init::fan_in<T>(d, inner, rng));
    store.add(layer_name("enc", l, "wv"), init::fan_in<T>(d, inner, rng));
    store.add(layer_name("enc", l, "wo"), init::fan_in<T>(inner, d, rng));
    store.add(layer_name("enc", l, "ffn_norm"), Tensor<T>::matrix(1, d, T(1)));
    store.add(layer_name("enc", l, "wi"), init::fan_in<T>(d, cfg.d_ff, rng));
    store.add(layer_name("enc", l, "wff"), init::fan_in<T>(cfg.d_ff, d, rng));
  }
  store.add("enc.final_norm", Tensor<T>::matrix(1, d, T(1)));
}

template <class T>
void add_decoder_params(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.d_model, inner = cfg.inner();
  store.add("dec.rel_bias", init::normal<T>(static_cast<std::size_t>(cfg.rel_bias_buckets), cfg.n_heads, 0.1, rng));
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
    for (const char* part : {"self", "cross"}) {
      const std::string p = part;
      store.add(layer_name("dec", l, (p + "_norm").c_str()), Tensor<T>::matrix(1, d, T(1)));
      store.add(layer_name("dec", l, (p + "_wq").c_str()), init::fan_in<T>(d, inner, rng));
      store.add(layer_name("dec", l, (p + "_wk").c_str()), init::fan_in<T>(d, inner, rng));
      store.add(layer_name("dec", l, (p + "_wv").c_str()), init::fan_in<T>(d, inner, rng));
      store.add(layer_name("dec", l, (p + "_wo").c_str()), init::fan_in<T>(inner, d, rng));
    }
    store.add(layer_name("dec", l, "ffn_norm"), Tensor<T>::matrix(1, d, T(1)));
    store.add(layer_name("dec", l, "wi"), init::fan_in<T>(d, cfg.d_ff, rng));
    store.add(layer_name("dec", l, "wff"), init::fan_in<T>(cfg.d_ff, d, rng));
  }
  store.add("dec.final_norm", Tensor<T>::matrix(1, d, T(1)));
  store.add("dec.lm_head", init::fan_in<T>(d, cfg.vocab_size, rng));
}

namespace detail {

template <class T>
ad::Var<T> feed_forward(Binding<T>& p, const char* stack, std::size_t l, ad::Var<T> h) {
  return ad::matmul(ad::gelu(ad::matmul(h, p(layer_name(stack, l, "wi")))), p(layer_name(stack, l, "wff")));
}

}  // namespace detail

/// Pre-norm self-attention + GeLU feed-forward stack with residuals and a
/// shared relative position bias. A zero-layer stack returns its input.
template <class T>
EncoderOutput<T> encode(Binding<T>& p, ad::Var<T> x, const Mask& mask, const ModelConfig& cfg,
                        ForwardContext<T>& ctx) {
  const std::size_t len = x.rows();
  if (len == 0) throw std::invalid_argument("encode: empty latent sequence");
  if (cfg.n_enc_layers == 0) return {x, mask};
  const auto buckets = bucket_matrix(len, len, true, cfg.rel_bias_buckets, cfg.rel_bias_max_distance);
  ad::AttentionBias<T> bias{p("enc.rel_bias"), buckets};
  x = ctx.drop(x);
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    auto h = ad::rms_norm(x, p(layer_name("enc", l, "attn_norm")));
    ad::AttentionOptions<T> opt;
    opt.heads = cfg.n_heads;
    opt.key_mask = mask;
    opt.bias = &bias;
    Tensor<T> probs;
    if (ctx.attention_probs) opt.probs_out = &probs;
    auto a = ad::attention(ad::matmul(h, p(layer_name("enc", l, "wq"))), ad::matmul(h, p(layer_name("enc", l, "wk"))),
                           ad::matmul(h, p(layer_name("enc", l, "wv"))), opt);
    if (ctx.attention_probs) ctx.attention_probs->push_back(std::move(probs));
    x = ad::add(x, ctx.drop(ad::matmul(a, p(layer_name("enc", l, "wo")))));
    h = ad::rms_norm(x, p(layer_name("enc", l, "ffn_norm")));
    x = ad::add(x, ctx.drop(detail::feed_forward(p, "enc", l, h)));
  }
  return {ctx.drop(ad::rms_norm(x, p("enc.final_norm"))), mask};
}

/// Teacher-forced decoder input: a start token followed by the target
/// shifted right by one.
inline std::vector<int> shift_right(const std::vector<int>& target, int start_id = kPadId) {
  std::vector<int> in(target.size());
  in[0] = start_id;
  for (std::size_t i = 1; i < target.size(); ++i) in[i] = target[i - 1];
  return in;
}

/// Causal decoder with cross-attention to the encoder output; returns
/// L_t x vocab_size logits.
template <class T>
ad::Var<T> decode(Binding<T>& p, const EncoderOutput<T>& enc, const ByteSequence& target, const ModelConfig& cfg,
                  ForwardContext<T>& ctx) {
  if (target.ids.empty()) throw std::invalid_argument("decode: empty target");
  if (cfg.n_dec_layers == 0) throw std::logic_error("decode: model has no decoder");
  const auto inputs = shift_right(target.ids);
  const std::size_t len = inputs.size();
  auto x = ctx.drop(ad::gather_rows(p("embed"), inputs));
  const auto buckets = bucket_matrix(len, len, false, cfg.rel_bias_buckets, cfg.rel_bias_max_distance);
  ad::AttentionBias<T> bias{p("dec.rel_bias"), buckets};
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
    auto h = ad::rms_norm(x, p(layer_name("dec", l, "self_norm")));
    ad::AttentionOptions<T> self;
    self.heads = cfg.n_heads;
    self.causal = true;
    self.bias = &bias;
    auto a = ad::attention(ad::matmul(h, p(layer_name("dec", l, "self_wq"))),
                           ad::matmul(h, p(layer_name("dec", l, "self_wk"))),
                           ad::matmul(h, p(layer_name("dec", l, "self_wv"))), self);
    x = ad::add(x, ctx.drop(ad::matmul(a, p(layer_name("dec", l, "self_wo")))));

    h = ad::rms_norm(x, p(layer_name("dec", l, "cross_norm")));
    ad::AttentionOptions<T> cross;
    cross.heads = cfg.n_heads;
    cross.key_mask = enc.mask;
    auto c = ad::attention(ad::matmul(h, p(layer_name("dec", l, "cross_wq"))),
                           ad::matmul(enc.y, p(layer_name("dec", l, "cross_wk"))),
                           ad::matmul(enc.y, p(layer_name("dec", l, "cross_wv"))), cross);
    x = ad::add(x, ctx.drop(ad::matmul(c, p(layer_name("dec", l, "cross_wo")))));

    h = ad::rms_norm(x, p(layer_name("dec", l, "ffn_norm")));
    x = ad::add(x, ctx.drop(detail::feed_forward(p, "dec", l, h)));
  }
  x = ctx.drop(ad::rms_norm(x, p("dec.final_norm")));
  return ad::matmul(x, p("dec.lm_head"));
}

}  // namespace utc::transformer
