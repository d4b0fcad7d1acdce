#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "utc/config.hpp"
#include "utc/train.hpp"

namespace utc::bench {

struct Variant {
  std::string name;
  RunConfig config;
  bool regression_head = false;  // false: seq2seq finetuning through the decoder
};

struct BenchOptions {
  std::size_t input_bytes = 512;
  std::size_t batch = 32;
  std::size_t steps = 10;        // timed steps per run
  std::size_t warmup_steps = 1;  // untimed
  std::size_t runs = 2;
  std::size_t target_len = 64;   // padded seq2seq target length
  std::uint64_t seed = 0;
};

struct RunTiming {
  double median = 0;  // 1 / median step time
  double mean = 0;    // steps / total time
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct VariantResult {
  std::string name;
  std::vector<double> steps_per_sec;       // median-step throughput, one per run
  std::vector<double> mean_steps_per_sec;  // whole-run throughput, one per run
  std::vector<std::vector<double>> step_seconds;  // per run, per timed step
  std::size_t params = 0;
  double mean() const {
    double s = 0;
    for (double v : steps_per_sec) s += v;
    return steps_per_sec.empty() ? 0.0 : s / static_cast<double>(steps_per_sec.size());
  }
};

/// byte-level baseline, +GBST, +regression head without decoder, scaled-up.
inline std::vector<Variant> default_variants(const RunConfig& base) {
  RunConfig byte = base;
  byte.use_gbst = false;
  RunConfig gbst = base;
  gbst.use_gbst = true;
  gbst.downsample = 2;
  RunConfig head = gbst;
  head.n_dec_layers = 0;
  RunConfig big = head;
  big.d_model = base.d_model * 2;
  big.d_ff = base.d_ff * 2;
  big.n_heads = base.n_heads * 2;
  return {{"byte_baseline", byte, false}, {"gbst_ds2", gbst, false}, {"gbst_regression_head", head, true},
          {"scaled_up", big, true}};
}

/// Deterministic pseudo-text of exactly n bytes.
inline std::string synthetic_text(std::size_t n, std::uint64_t seed) {
  static const char* words[] = {"the", "model", "reads", "raw", "bytes", "without", "a", "tokenizer", "and",
                                "learns", "latent", "subwords", "from", "data", "quickly"};
  Rng rng(seed);
  std::string s;
  while (s.size() < n) {
    s += words[uniform_index(rng, 15)];
    s += ' ';
  }
  s.resize(n);
  return s;
}

/// One fresh f32 model of a variant with a fixed synthetic batch.
class Session {
 public:
  Session(const Variant& v, const BenchOptions& opt) : head_(v.regression_head), cfg_(v.config) {
    cfg_.max_len = opt.input_bytes;
    cfg_.batch_size = opt.batch;
    cfg_.lr_schedule = "constant";
    cfg_.learning_rate = 1e-3;
    cfg_.dropout = 0.1;
    cfg_.log_every = 0;
    cfg_.checkpoint_every = 0;
    cfg_.max_steps = 1;
    cfg_.seed = opt.seed;
    if (head_ && cfg_.attributes.empty()) cfg_.attributes = {"toxicity"};
    for (std::size_t i = 0; i < opt.batch; ++i) {
      inputs_.push_back(
          encode_text(synthetic_text(opt.input_bytes, derive_seed(opt.seed, {i})), opt.input_bytes, true));
      targets_.push_back(encode_text(synthetic_text(8, derive_seed(opt.seed, {i, 1})), opt.target_len, false));
      labels_.push_back({{static_cast<double>(i % 2)}, {}});
    }
    model_ = std::make_unique<UtcModel<float>>(cfg_.architecture(), opt.seed);
    if (head_) model_->attach_regression_head(cfg_.attributes, opt.seed);
  }

  std::size_t params() const { return model_->params().count(); }

  /// One optimizer step over the batch; returns wall seconds.
  double step() {
    train::ExampleLoss<float> loss = [this](Binding<float>& p, transformer::ForwardContext<float>& ctx,
                                            std::size_t i) {
      return head_ ? model_->regression_loss(p, inputs_[i], labels_[i], ctx)
                   : model_->seq2seq_loss(p, inputs_[i], targets_[i], ctx);
    };
    auto batch_for = [n = inputs_.size()](std::size_t) {
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      return idx;
    };
    const auto t0 = std::chrono::steady_clock::now();
    train::run(*model_, cfg_, batch_for, loss);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

 private:
  bool head_;
  RunConfig cfg_;
  std::vector<ByteSequence> inputs_, targets_;
  std::vector<heads::AttributeLabels> labels_;
  std::unique_ptr<UtcModel<float>> model_;
};

/// Warmup, then timed steps; throughput from the median step.
inline RunTiming run_once(const Variant& v, const BenchOptions& opt, std::size_t* params = nullptr) {
  Session s(v, opt);
  if (params) *params = s.params();
  for (std::size_t i = 0; i < opt.warmup_steps; ++i) s.step();
  std::vector<double> times;
  for (std::size_t i = 0; i < opt.steps; ++i) times.push_back(s.step());
  double total = 0;
  for (double t : times) total += t;
  return {1.0 / median(times), static_cast<double>(opt.steps) / total};
}

/// Each run builds fresh models of all variants and times their steps round
/// robin, so drift in machine speed hits every variant of a run alike.
inline std::vector<VariantResult> run_all(const std::vector<Variant>& variants, const BenchOptions& opt,
                                          const std::function<void(const VariantResult&, std::size_t run)>& progress = {}) {
  const std::size_t nv = variants.size();
  std::vector<VariantResult> res(nv);
  for (std::size_t i = 0; i < nv; ++i) res[i].name = variants[i].name;
  for (std::size_t run = 0; run < opt.runs; ++run) {
    std::vector<std::unique_ptr<Session>> sessions;
    for (const auto& v : variants) sessions.push_back(std::make_unique<Session>(v, opt));
    for (std::size_t w = 0; w < opt.warmup_steps; ++w)
      for (auto& s : sessions) s->step();
    std::vector<std::vector<double>> times(nv);
    for (std::size_t k = 0; k < opt.steps; ++k)
      for (std::size_t i = 0; i < nv; ++i) times[i].push_back(sessions[i]->step());
    for (std::size_t i = 0; i < nv; ++i) {
      double total = 0;
      for (double t : times[i]) total += t;
      res[i].params = sessions[i]->params();
      res[i].steps_per_sec.push_back(1.0 / median(times[i]));
      res[i].mean_steps_per_sec.push_back(static_cast<double>(opt.steps) / total);
      res[i].step_seconds.push_back(std::move(times[i]));
      if (progress) progress(res[i], run);
    }
  }
  return res;
}

/// Speedup of `fast` over `slow` in one run: median over rounds of the
/// paired step-time ratio. Both must come from the same run_all call.
inline double paired_speedup(const VariantResult& fast, const VariantResult& slow, std::size_t run) {
  const auto& f = fast.step_seconds.at(run);
  const auto& s = slow.step_seconds.at(run);
  std::vector<double> r;
  for (std::size_t k = 0; k < std::min(f.size(), s.size()); ++k) r.push_back(s[k] / f[k]);
  return median(r);
}

inline void write_csv(std::ostream& out, const std::vector<VariantResult>& results) {
  out << "variant,run,steps_per_sec,mean_steps_per_sec,params\n";
  out.precision(6);
  for (const auto& r : results)
    for (std::size_t i = 0; i < r.steps_per_sec.size(); ++i)
      out << r.name << ',' << i << ',' << r.steps_per_sec[i] << ',' << r.mean_steps_per_sec[i] << ',' << r.params
          << '\n';
}

}  // namespace utc::bench
