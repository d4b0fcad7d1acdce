#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "utc/config.hpp"
#include "utc/dataset.hpp"
#include "utc/model.hpp"
#include "utc/optim.hpp"
#include "utc/pretrain.hpp"

namespace utc::train {

struct LossRecord {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};

struct TrainResult {
  std::vector<LossRecord> log;  // one entry per step
  bool diverged = false;
  std::size_t steps_completed = 0;
  std::string message;
};

template <class T>
struct Hooks {
  std::function<void(const LossRecord&)> on_log;                             // every log_every steps
  std::function<void(std::size_t step, const UtcModel<T>&)> on_checkpoint;  // every checkpoint_every and at the end
  std::function<bool(std::size_t step)> stop;                               // polled every log_every steps
};

/// Per-example loss on its own tape; the trainer accumulates gradients.
template <class T>
using ExampleLoss = std::function<ad::Var<T>(Binding<T>&, transformer::ForwardContext<T>&, std::size_t example)>;

/// Runs `steps` optimizer steps. `batch_for(step)` names the examples of a
/// step. A non-finite loss or gradient stops training before the update, so
/// the parameters (and the last checkpoint) stay at the last good step.
template <class T>
TrainResult run(UtcModel<T>& model, const RunConfig& cfg, const std::function<std::vector<std::size_t>(std::size_t)>& batch_for,
                const ExampleLoss<T>& loss_fn, const Hooks<T>& hooks = {}) {
  TrainResult result;
  optim::Adam<T> adam({cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
  auto& store = model.params();
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    store.zero_grad();
    const auto batch = batch_for(step);
    const T inv = T(1) / static_cast<T>(batch.size());
    double total = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      ad::Tape<T> tape;
      Binding<T> p(tape, store, true);
      Rng rng(derive_seed(cfg.seed, {0x64726f70ULL, step, b}));
      transformer::ForwardContext<T> ctx;
      ctx.training = true;
      ctx.dropout = static_cast<T>(cfg.dropout);
      ctx.rng = &rng;
      auto loss = loss_fn(p, ctx, batch[b]);
      tape.backward(loss);
      p.accumulate_into(store, inv);
      total += static_cast<double>(loss.value().data[0]);
    }
    LossRecord rec;
    rec.step = step;
    rec.loss = total / static_cast<double>(batch.size());
    rec.lr = optim::learning_rate(cfg.lr_schedule, step, cfg.learning_rate, cfg.warmup_steps);
    rec.grad_norm = optim::clip_grad_norm(store, cfg.clip_norm);
    if (!std::isfinite(rec.loss) || !std::isfinite(rec.grad_norm)) {
      result.diverged = true;
      result.message = "non-finite loss at step " + std::to_string(step) + "; parameters kept from step " +
                       std::to_string(step - 1);
      result.log.push_back(rec);
      return result;
    }
    adam.step(store, rec.lr);
    result.log.push_back(rec);
    result.steps_completed = step;
    if (hooks.on_log && cfg.log_every && (step % cfg.log_every == 0 || step == cfg.max_steps)) hooks.on_log(rec);
    if (hooks.on_checkpoint && ((cfg.checkpoint_every && step % cfg.checkpoint_every == 0) || step == cfg.max_steps)) {
      hooks.on_checkpoint(step, model);
    }
    if (hooks.stop && cfg.log_every && step % cfg.log_every == 0 && hooks.stop(step)) break;
  }
  return result;
}

/// Epoch-wise shuffled batches over n examples, reproducible from the seed.
inline std::function<std::vector<std::size_t>(std::size_t)> shuffled_batches(std::size_t n, std::size_t batch,
                                                                             std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("no training examples");
  const std::size_t b = std::min(batch, n);
  return [n, b, seed](std::size_t step) {
    const std::size_t start = (step - 1) * b;
    std::vector<std::size_t> out, perm;
    std::size_t cached_epoch = ~std::size_t{0};
    for (std::size_t k = start; k < start + b; ++k) {
      const std::size_t epoch = k / n;
      if (epoch != cached_epoch) {
        perm.resize(n);
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(derive_seed(seed, {0x73687566ULL, epoch}));
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
        cached_epoch = epoch;
      }
      out.push_back(perm[k % n]);
    }
    return out;
  };
}

inline heads::AttributeLabels labels_for(const LabeledExample& ex, const std::vector<std::string>& attributes) {
  heads::AttributeLabels l;
  for (const auto& a : attributes) {
    auto it = ex.labels.find(a);
    l.values.push_back(it == ex.labels.end() ? 0.0 : it->second);
    l.present.push_back(it != ex.labels.end());
  }
  return l;
}

/// Regression finetuning with sigmoid cross entropy.
template <class T>
TrainResult finetune(UtcModel<T>& model, const std::vector<LabeledExample>& data, const RunConfig& cfg,
                     const Hooks<T>& hooks = {}) {
  if (!model.arch().has_head()) throw std::logic_error("finetune needs a model with a regression head");
  std::vector<ByteSequence> inputs;
  std::vector<heads::AttributeLabels> labels;
  for (const auto& ex : data) {
    inputs.push_back(encode_text(ex.text, model.arch().max_len, true));
    labels.push_back(labels_for(ex, model.arch().attributes));
  }
  ExampleLoss<T> loss = [&](Binding<T>& p, transformer::ForwardContext<T>& ctx, std::size_t i) {
    return model.regression_loss(p, inputs[i], labels[i], ctx);
  };
  return run(model, cfg, shuffled_batches(data.size(), cfg.batch_size, cfg.seed), loss, hooks);
}

/// Span-corruption denoising over a corpus mixture.
template <class T>
TrainResult pretrain(UtcModel<T>& model, const pretrain::CorpusMixture& mix, const RunConfig& cfg,
                     const Hooks<T>& hooks = {}) {
  if (!model.arch().has_decoder()) throw std::logic_error("pretraining needs a decoder");
  const auto scfg = cfg.span_config();
  std::vector<pretrain::CorruptedPair> current;
  auto batch_for = [&](std::size_t step) {
    current = pretrain::pretrain_batch(mix, scfg, cfg.batch_size, cfg.seed, step);
    std::vector<std::size_t> idx(current.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  };
  ExampleLoss<T> loss = [&](Binding<T>& p, transformer::ForwardContext<T>& ctx, std::size_t i) {
    return model.seq2seq_loss(p, current[i].input, current[i].target, ctx);
  };
  return run(model, cfg, batch_for, loss, hooks);
}

/// Scores in input order; each text is scored independently.
template <class T>
std::vector<std::vector<T>> score_texts(const UtcModel<T>& model, const std::vector<std::string>& texts) {
  std::vector<std::vector<T>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(model.score_text(t));
  return out;
}

}  // namespace utc::train
