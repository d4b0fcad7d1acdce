#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "utc/byte_frontend.hpp"
#include "utc/params.hpp"
#include "utc/transformer.hpp"

namespace utc::heads {

/// Per-attribute targets in [0, 1]; absent attributes are left out of the loss.
struct AttributeLabels {
  std::vector<double> values;
  Mask present;  // empty: every attribute present
};

/// Shape of the k_r-way regression head. Parameters live in the model's
/// store under "head.*".
struct RegressionHead {
  std::size_t d_model = 0;
  std::vector<std::string> attributes;
  std::size_t k_r() const { return attributes.size(); }
};

template <class T>
void add_regression_head_params(ParamStore<T>& store, const RegressionHead& head, Rng& rng) {
  if (head.k_r() == 0) throw std::invalid_argument("regression head needs at least one attribute");
  store.add("head.pool_w", init::fan_in<T>(head.d_model, head.d_model, rng));
  store.add("head.pool_b", Tensor<T>::matrix(1, head.d_model, T(0)));
  store.add("head.w_r", init::fan_in<T>(head.d_model, head.k_r(), rng));
}

/// First pooling: the GeLU MLP applied to encoder position 0. The MLP is
/// position-wise, so only row 0 is projected.
template <class T>
ad::Var<T> first_pool(Binding<T>& p, const transformer::EncoderOutput<T>& enc) {
  auto first = ad::slice_rows(enc.y, 0, 1);
  return ad::gelu(ad::add_row(ad::matmul(first, p("head.pool_w")), p("head.pool_b")));
}

/// Pre-sigmoid logits y_R = pooled * W_r, shape 1 x k_r.
template <class T>
ad::Var<T> regression_logits(Binding<T>& p, ad::Var<T> pooled) {
  return ad::matmul(pooled, p("head.w_r"));
}

template <class T>
std::vector<T> sigmoid_scores(const Tensor<T>& logits) {
  std::vector<T> out(logits.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad::stable_sigmoid(logits.data[i]);
  return out;
}

template <class T>
ad::Var<T> sigmoid_bce_loss(ad::Var<T> logits, const AttributeLabels& labels) {
  std::vector<T> y(labels.values.begin(), labels.values.end());
  return ad::sigmoid_bce<T>(logits, y, labels.present);
}

/// Token-level cross entropy averaged over unpadded target positions.
template <class T>
ad::Var<T> seq2seq_ce_loss(ad::Var<T> logits, const ByteSequence& target) {
  return ad::softmax_cross_entropy<T>(logits, target.ids, target.mask);
}

}  // namespace utc::heads
