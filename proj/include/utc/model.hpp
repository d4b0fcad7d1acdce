#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "utc/byte_frontend.hpp"
#include "utc/gbst.hpp"
#include "utc/heads.hpp"
#include "utc/params.hpp"
#include "utc/transformer.hpp"

namespace utc {

/// Everything needed to rebuild a model's parameter layout.
struct Architecture {
  transformer::ModelConfig model;
  gbst::GbstConfig gbst;
  bool use_gbst = true;                 // false: encoder reads byte embeddings directly
  std::vector<std::string> attributes;  // non-empty: regression head attached
  std::size_t max_len = 512;
  std::size_t num_sentinels = 32;

  bool has_decoder() const { return model.n_dec_layers > 0; }
  bool has_head() const { return !attributes.empty(); }

  void validate() const {
    model.validate();
    if (use_gbst) gbst.validate();
    if (use_gbst && gbst.d_model != model.d_model) throw std::invalid_argument("gbst d_model must match the encoder");
    if (model.vocab_size != static_cast<std::size_t>(kByteVocabSize) + num_sentinels) {
      throw std::invalid_argument("vocab_size must equal 259 + num_sentinels");
    }
    if (max_len < 2) throw std::invalid_argument("max_len must be at least 2");
  }
};

/// Byte embeddings -> optional GBST -> encoder, with a detachable decoder
/// (seq2seq denoising) and an attachable k_r-way regression head.
template <class T>
class UtcModel {
 public:
  UtcModel(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.gbst.d_model = arch_.model.d_model;
    arch_.validate();
    Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
    params_.add("embed", init::normal<T>(arch_.model.vocab_size, arch_.model.d_model, 1.0, rng));
    if (arch_.use_gbst) {
      for (std::size_t b = 1; b <= arch_.gbst.max_block; ++b) {
        const std::size_t w = arch_.gbst.conv_width_for(b);
        params_.add(conv_name(b), init::normal<T>(w, arch_.model.d_model, 1.0 / static_cast<double>(w), rng));
      }
      params_.add("gbst.score", init::fan_in<T>(arch_.model.d_model, 1, rng));
    }
    transformer::add_encoder_params(params_, arch_.model, rng);
    if (arch_.has_decoder()) transformer::add_decoder_params(params_, arch_.model, rng);
    if (arch_.has_head()) heads::add_regression_head_params(params_, head_shape(), rng);
  }

  /// Rebuilds from an architecture plus previously saved parameters.
  UtcModel(Architecture arch, ParamStore<T> params) : arch_(std::move(arch)), params_(std::move(params)) {
    arch_.gbst.d_model = arch_.model.d_model;
    arch_.validate();
  }

  const Architecture& arch() const { return arch_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  static std::string conv_name(std::size_t b) { return "gbst.conv." + std::to_string(b); }

  heads::RegressionHead head_shape() const { return {arch_.model.d_model, arch_.attributes}; }

  gbst::GbstParams<T> bind_gbst(Binding<T>& p) const {
    gbst::GbstParams<T> g;
    for (std::size_t b = 1; b <= arch_.gbst.max_block; ++b) g.conv.push_back(p(conv_name(b)));
    g.score = p("gbst.score");
    return g;
  }

  /// Input bytes to encoder output (Y'_out).
  transformer::EncoderOutput<T> encode(Binding<T>& p, const ByteSequence& input,
                                       transformer::ForwardContext<T>& ctx) const {
    auto emb = embed<T>(input, p("embed"));
    if (!arch_.use_gbst) return transformer::encode(p, emb.x, emb.mask, arch_.model, ctx);
    auto latent = gbst::gbst_forward(emb, arch_.gbst, bind_gbst(p));
    return transformer::encode(p, latent.x, latent.mask, arch_.model, ctx);
  }

  ad::Var<T> head_logits(Binding<T>& p, const transformer::EncoderOutput<T>& enc) const {
    if (!arch_.has_head()) throw std::logic_error("model has no regression head");
    return heads::regression_logits(p, heads::first_pool(p, enc));
  }

  ad::Var<T> decoder_logits(Binding<T>& p, const transformer::EncoderOutput<T>& enc, const ByteSequence& target,
                            transformer::ForwardContext<T>& ctx) const {
    return transformer::decode(p, enc, target, arch_.model, ctx);
  }

  ad::Var<T> seq2seq_loss(Binding<T>& p, const ByteSequence& input, const ByteSequence& target,
                          transformer::ForwardContext<T>& ctx) const {
    auto enc = encode(p, input, ctx);
    return heads::seq2seq_ce_loss(decoder_logits(p, enc, target, ctx), target);
  }

  ad::Var<T> regression_loss(Binding<T>& p, const ByteSequence& input, const heads::AttributeLabels& labels,
                             transformer::ForwardContext<T>& ctx) const {
    auto enc = encode(p, input, ctx);
    return heads::sigmoid_bce_loss(head_logits(p, enc), labels);
  }

  /// Inference: per-attribute probabilities in (0, 1).
  std::vector<T> score(const ByteSequence& input) const {
    ad::Tape<T> tape;
    Binding<T> p(tape, params_, false);
    transformer::ForwardContext<T> ctx;
    auto enc = encode(p, input, ctx);
    return heads::sigmoid_scores(head_logits(p, enc).value());
  }

  std::vector<T> score_text(std::string_view text) const {
    return score(encode_text(text, arch_.max_len, true));
  }

  /// Greedy decoding without caching; stops after EOS or max_steps ids.
  std::vector<int> greedy_decode(const ByteSequence& input, std::size_t max_steps) const {
    ad::Tape<T> tape;
    Binding<T> p(tape, params_, false);
    transformer::ForwardContext<T> ctx;
    auto enc = encode(p, input, ctx);
    std::vector<int> out;
    for (std::size_t step = 0; step < max_steps; ++step) {
      std::vector<int> partial = out;
      partial.push_back(kPadId);  // placeholder for the position being predicted
      auto logits = decoder_logits(p, enc, make_sequence(partial, partial.size()), ctx);
      const T* row = logits.value().row(out.size());
      const int next = static_cast<int>(std::max_element(row, row + logits.cols()) - row);
      out.push_back(next);
      if (next == kEosId) break;
    }
    return out;
  }

  /// Drops every decoder parameter; encoder parameters are untouched.
  void remove_decoder() {
    params_.erase_prefix("dec.");
    arch_.model.n_dec_layers = 0;
  }

  void attach_regression_head(std::vector<std::string> attributes, std::uint64_t seed) {
    params_.erase_prefix("head.");
    arch_.attributes = std::move(attributes);
    Rng rng(derive_seed(seed, {0x68656164ULL}));
    heads::add_regression_head_params(params_, head_shape(), rng);
  }

 private:
  Architecture arch_;
  ParamStore<T> params_;
};

}  // namespace utc
