// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <future>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <httplib.h>
#include <json.hpp>

#include "utc/bench.hpp"
#include "utc/checkpoint.hpp"
#include "utc/config.hpp"
#include "utc/eval.hpp"
#include "utc/gbst.hpp"
#include "utc/grad_check.hpp"
#include "utc/pretrain.hpp"
#include "utc/robustness.hpp"
#include "utc/serve.hpp"
#include "utc/train.hpp"

using namespace utc;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

std::string random_text(std::size_t n, Rng& rng) {
  std::string s(n, ' ');
  for (auto& c : s) c = static_cast<char>(32 + uniform_index(rng, 95));
  return s;
}

// 1 ------------------------------------------------------------------------
Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const std::size_t lengths[] = {9, 16, 17};
  double worst = 0;
  bool finite = true;
  for (std::size_t inst = 0; inst < 20; ++inst) {
    Architecture arch;
    arch.model.d_model = 8;
    arch.model.d_ff = 16;
    arch.model.d_kv = 4;
    arch.model.n_heads = 2;
    arch.model.n_enc_layers = 2;
    arch.model.n_dec_layers = 0;
    arch.gbst.d_model = 8;
    arch.gbst.max_block = 4;
    arch.gbst.downsample = 2;
    arch.attributes = {"toxicity", "insult"};
    arch.max_len = lengths[inst % 3];
    UtcModel<double> model(arch, 1000 + inst);
    Rng rng(derive_seed(77, {inst}));
    const auto input = encode_text(random_text(1 + uniform_index(rng, arch.max_len), rng), arch.max_len, true);
    heads::AttributeLabels labels{{uniform01(rng), uniform01(rng)}, {}};
    const auto names = model.params().names();
    std::vector<Tensor<double>> theta;
    for (const auto& n : names) theta.push_back(model.params().at(n).value);
    ad::GraphBuilder<double> f = [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> th) {
      Binding<double> p(tape, model.params(), false);
      for (std::size_t i = 0; i < names.size(); ++i) p.bind(names[i], th[i]);
      transformer::ForwardContext<double> ctx;
      return model.regression_loss(p, input, labels, ctx);
    };
    const auto r = ad::grad_check<double>(f, theta);
    finite = finite && r.finite;
    worst = std::max(worst, r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  return {finite && worst < 1e-4 && secs < 60,
          "20 instances, max rel error " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s"};
}

// 2 ------------------------------------------------------------------------
Outcome gbst_laws() {
  std::size_t len_fail = 0, sum_fail = 0, sat_fail = 0, cases = 0;
  double worst_sum = 0, worst_sat = 0;
  Rng rng(2);
  for (std::size_t ds : {1u, 2u, 3u}) {
    gbst::GbstConfig cfg{.max_block = 4, .conv_width = 5, .downsample = ds, .d_model = 6};
    for (std::size_t len = 1; len <= 64; ++len) {
      ++cases;
      ad::Tape<double> tape;
      auto x = Tensor<double>::matrix(len, cfg.d_model);
      for (auto& v : x.data) v = 2 * uniform01(rng) - 1;
      EmbeddedByteSequence<double> in{tape.constant(x), Mask(len, 1)};
      gbst::GbstParams<double> p;
      for (std::size_t b = 1; b <= cfg.max_block; ++b) {
        auto k = Tensor<double>::matrix(cfg.conv_width_for(b), cfg.d_model);
        for (auto& v : k.data) v = uniform01(rng) - 0.5;
        p.conv.push_back(tape.constant(k));
      }
      auto s = Tensor<double>::matrix(cfg.d_model, 1);
      for (auto& v : s.data) v = uniform01(rng) - 0.5;
      p.score = tape.constant(s);

      const auto out = gbst::gbst_forward(in, cfg, p);
      if (out.x.rows() != (len + ds - 1) / ds) ++len_fail;

      const auto cands = gbst::enumerate_blocks(in, cfg, p);
      const auto comp = gbst::compose(cands);
      for (std::size_t i = 0; i < len; ++i) {
        double total = 0;
        for (std::size_t b = 0; b < cfg.max_block; ++b) total += comp.weights.value()(i, b);
        worst_sum = std::max(worst_sum, std::abs(total - 1));
        if (std::abs(total - 1) > 1e-6) ++sum_fail;
      }

      // Saturation: score +20 on one block per position, -20 elsewhere.
      gbst::BlockCandidateSet<double> sat = cands;
      auto scores = Tensor<double>::matrix(len, cfg.max_block, -20.0);
      std::vector<std::size_t> dominant(len);
      for (std::size_t i = 0; i < len; ++i) scores(i, dominant[i] = uniform_index(rng, cfg.max_block)) = 20.0;
      sat.scores = tape.constant(scores);
      const auto sc = gbst::compose(sat);
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
          const double d = std::abs(sc.x.value()(i, c) - cands.blocks[dominant[i]].value()(i, c));
          worst_sat = std::max(worst_sat, d);
        }
      if (worst_sat > 1e-6) ++sat_fail;
    }
  }
  return {len_fail + sum_fail + sat_fail == 0,
          std::to_string(cases) + " (L, d_s) cases; length failures " + std::to_string(len_fail) +
              ", max |sum-1| " + fmt(worst_sum, 3) + ", max saturation error " + fmt(worst_sat, 3)};
}

// 3 ------------------------------------------------------------------------
double mean_bce(const std::vector<double>& p, const std::vector<int>& y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-15, 1 - 1e-15);
    s -= y[i] ? std::log(q) : std::log(1 - q);
  }
  return s / static_cast<double>(p.size());
}

Outcome overfit_smoke() {
  const auto t0 = Clock::now();
  static const char* neutral[] = {"the", "weather", "is", "nice", "today", "we", "went", "to", "market",
                                  "and", "bought", "some", "fresh", "bread", "with", "friends"};
  static const char* toxic[] = {"idiot", "stupid", "moron", "loser"};
  Rng rng(3);
  std::vector<LabeledExample> data;
  for (std::size_t i = 0; i < 32; ++i) {
    LabeledExample ex;
    const bool pos = i % 2 == 0;
    const std::size_t words = 3 + uniform_index(rng, 5);
    const std::size_t slot = uniform_index(rng, words);
    for (std::size_t w = 0; w < words; ++w) {
      if (w) ex.text += ' ';
      ex.text += pos && w == slot ? toxic[uniform_index(rng, 4)] : neutral[uniform_index(rng, 16)];
    }
    ex.labels["toxicity"] = pos;
    data.push_back(ex);
  }
  RunConfig cfg;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.d_kv = 8;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 0;
  cfg.max_len = 48;
  cfg.batch_size = 32;
  cfg.lr_schedule = "constant";
  cfg.learning_rate = 1e-3;
  cfg.dropout = 0.0;
  cfg.max_steps = 2000;
  cfg.log_every = 25;
  cfg.checkpoint_every = 0;
  cfg.seed = 3;
  UtcModel<float> model(cfg.architecture(), cfg.seed);
  model.attach_regression_head({"toxicity"}, cfg.seed);

  std::vector<int> y;
  for (const auto& ex : data) y.push_back(ex.labels.at("toxicity") > 0.5);
  auto measure = [&] {
    std::vector<double> p;
    for (const auto& ex : data) p.push_back(model.score_text(ex.text)[0]);
    return std::make_pair(eval::auc_roc(p, y).value_or(0.0), mean_bce(p, y));
  };
  // Training stops at the first logged step meeting both targets.
  std::size_t reached = 0;
  std::pair<double, double> at_stop{0, 1e9};
  train::Hooks<float> hooks;
  hooks.stop = [&](std::size_t step) {
    at_stop = measure();
    if (at_stop.first == 1.0 && at_stop.second < 0.05) reached = step;
    return reached != 0;
  };
  train::finetune(model, data, cfg, hooks);
  const double secs = seconds_since(t0);
  return {reached > 0 && reached <= 2000 && secs < 300,
          "AUC " + fmt(at_stop.first) + ", mean BCE " + fmt(at_stop.second, 3) + " at step " +
              (reached ? std::to_string(reached) : std::string("none")) + ", " + fmt(secs, 3) + " s"};
}

// 4 ------------------------------------------------------------------------
Outcome span_statistics() {
  pretrain::SpanCorruptionConfig cfg;
  cfg.max_len = 514;
  Rng rng(4);
  std::size_t corrupted = 0, content = 0, spans = 0;
  for (int t = 0; t < 10000; ++t) {
    std::string text(512, '\0');
    for (auto& c : text) c = static_cast<char>(uniform_index(rng, 256));
    const auto pair = pretrain::corrupt_spans(encode_text(text, 514, true), cfg, rng);
    content += 512;
    // Independent count from the input: each sentinel hides one span.
    std::size_t kept = 0;
    for (std::size_t i = 0; i < pair.input.size(); ++i) {
      if (!pair.input.mask[i]) continue;
      if (pretrain::is_sentinel(pair.input.ids[i], cfg.num_sentinels)) ++spans;
      else if (is_raw_byte(pair.input.ids[i])) ++kept;
    }
    corrupted += 512 - kept;
  }
  const double rate = static_cast<double>(corrupted) / static_cast<double>(content);
  const double mean = static_cast<double>(corrupted) / static_cast<double>(spans);

  std::size_t failures = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 600);
    std::string text(n, '\0');
    for (auto& c : text) c = static_cast<char>(uniform_index(rng, 256));
    pretrain::SpanCorruptionConfig c2;
    c2.max_len = n + 2;
    const auto seq = encode_text(text, n + 2, true);
    const auto pair = pretrain::corrupt_spans(seq, c2, rng);
    const auto rec = pretrain::reconstruct(pair.input, pair.target, c2.num_sentinels);
    std::vector<int> orig;
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (seq.mask[i]) orig.push_back(seq.ids[i]);
    failures += rec != orig;
  }
  return {std::abs(rate - 0.15) <= 0.02 && std::abs(mean - 20) <= 2 && failures == 0,
          "rate " + fmt(rate) + ", mean span " + fmt(mean) + " bytes, reconstruction failures " +
              std::to_string(failures) + "/1000"};
}

// 5 ------------------------------------------------------------------------
Outcome obfuscation_statistics() {
  // Corpus with letters, digits, punctuation, whitespace and UTF-8.
  static const char* pieces[] = {"hello", "World", "ça", "va?", "42", "fine!", "\xe2\x9c\x93", "x_y", "Tab\there",
                                 "OK.", "naïve", "(yes)"};
  Rng rng(5);
  std::vector<LabeledExample> corpus;
  std::size_t alpha = 0;
  while (alpha < 120000) {
    LabeledExample ex;
    for (int w = 0; w < 40; ++w) ex.text += std::string(pieces[uniform_index(rng, 12)]) + " ";
    for (unsigned char c : ex.text) alpha += robustness::is_ascii_alpha(c);
    corpus.push_back(std::move(ex));
  }
  // Probe dictionary: every letter becomes one marker byte, so outputs align with inputs.
  robustness::ObfuscationDictionary probe;
  for (char c = 'a'; c <= 'z'; ++c) probe.set(c, {"\x01"});
  const auto rates = robustness::default_sweep_rates();
  const auto sweep = robustness::sweep_obfuscation(corpus, rates, probe, 5);
  const auto real = robustness::sweep_obfuscation(corpus, rates, robustness::ObfuscationDictionary::builtin(), 5);
  bool ok = true;
  std::string detail;
  double worst_dev = 0;
  for (std::size_t r = 0; r < rates.size(); ++r) {
    std::size_t letters = 0, marked = 0, nonalpha_bad = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto& a = corpus[i].text;
      const auto& b = sweep[r].examples[i].text;
      if (a.size() != b.size()) {
        ++nonalpha_bad;
        continue;
      }
      for (std::size_t k = 0; k < a.size(); ++k) {
        const auto c = static_cast<unsigned char>(a[k]);
        if (robustness::is_ascii_alpha(c)) {
          ++letters;
          marked += b[k] == '\x01';
          if (b[k] != '\x01' && b[k] != a[k]) ++nonalpha_bad;
        } else if (b[k] != a[k]) {
          ++nonalpha_bad;
        }
      }
    }
    const double frac = static_cast<double>(marked) / static_cast<double>(letters);
    const double real_frac = real[r].stats.fraction();
    worst_dev = std::max({worst_dev, std::abs(frac - rates[r]), std::abs(real_frac - rates[r])});
    ok = ok && letters >= 100000 && std::abs(frac - rates[r]) <= 0.01 && std::abs(real_frac - rates[r]) <= 0.01 &&
         nonalpha_bad == 0;
    detail += fmt(rates[r] * 100, 3) + "%:" + fmt(frac * 100, 4) + " ";
  }
  bool identity = true;
  for (std::size_t i = 0; i < corpus.size(); ++i) identity = identity && real[0].examples[i].text == corpus[i].text;
  ok = ok && identity;
  return {ok, "measured % " + detail + "over " + std::to_string(alpha) + " letters; max deviation " +
                  fmt(worst_dev * 100, 3) + "pp; rate 0 identical: " + (identity ? "yes" : "no")};
}

// 6 ------------------------------------------------------------------------
std::optional<double> pairwise_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0;
  double np = 0, nn = 0;
  for (int v : l) (v ? np : nn) += 1;
  if (np == 0 || nn == 0) return std::nullopt;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
  return wins / (np * nn);
}

Outcome metric_oracles() {
  Rng rng(6);
  std::size_t mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + uniform_index(rng, 199);
    const std::size_t levels = 1 + uniform_index(rng, 25);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(uniform_index(rng, levels)) / 3.0;
      l[i] = static_cast<int>(uniform_index(rng, 2));
    }
    mismatches += eval::auc_roc(s, l) != pairwise_auc(s, l);
  }
  // Background +: .9 .6; background -: .2 .1; subgroup +: .8 .4; subgroup -: .95 .65.
  const std::vector<double> s{0.9, 0.6, 0.2, 0.1, 0.8, 0.4, 0.95, 0.65};
  const std::vector<int> l{1, 1, 0, 0, 1, 1, 0, 0};
  const std::vector<bool> sub{false, false, false, false, true, true, true, true};
  const auto b = eval::bias_triplet(s, l, sub);
  const bool triplet = b.subgroup_auc == 0.25 && b.bpsn_auc == 0.25 && b.bnsp_auc == 1.0;
  return {mismatches == 0 && triplet,
          "AUC mismatches " + std::to_string(mismatches) + "/100; triplet (" + fmt(b.subgroup_auc.value_or(-1)) +
              ", " + fmt(b.bpsn_auc.value_or(-1)) + ", " + fmt(b.bnsp_auc.value_or(-1)) + ") vs (0.25, 0.25, 1)"};
}

// 7 ------------------------------------------------------------------------
Outcome worst_group_arithmetic() {
  // 8 subpopulations with engineered correct counts out of their sizes.
  const std::size_t sizes[8] = {10, 10, 5, 20, 8, 4, 16, 7};
  const std::size_t correct[8] = {9, 8, 3, 20, 6, 1, 12, 7};
  std::vector<double> s;
  std::vector<int> l;
  std::vector<std::vector<std::string>> m;
  std::vector<std::string> groups;
  std::size_t total = 0, total_correct = 0;
  double expect_worst = 1;
  for (int g = 0; g < 8; ++g) {
    groups.push_back("g" + std::to_string(g));
    for (std::size_t i = 0; i < sizes[g]; ++i) {
      const int y = static_cast<int>(i % 2);
      const bool right = i < correct[g];
      l.push_back(y);
      s.push_back(right == (y == 1) ? 0.9 : 0.1);
      m.push_back({groups.back()});
    }
    total += sizes[g];
    total_correct += correct[g];
    expect_worst = std::min(expect_worst, static_cast<double>(correct[g]) / static_cast<double>(sizes[g]));
  }
  const double expect_avg = static_cast<double>(total_correct) / static_cast<double>(total);
  const auto r = eval::worst_group(s, l, m, groups);
  bool exact = r.avg_acc == expect_avg && r.worst_acc == expect_worst && r.gap == expect_avg - expect_worst;

  // {0.9, 0.8, 0.6} with sizes {10, 10, 5} -> (0.8, 0.6, 0.2).
  std::vector<double> s3;
  std::vector<int> l3;
  std::vector<std::vector<std::string>> m3;
  const std::size_t sz3[3] = {10, 10, 5}, ok3[3] = {9, 8, 3};
  for (int g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < sz3[g]; ++i) {
      l3.push_back(1);
      s3.push_back(i < ok3[g] ? 0.9 : 0.1);
      m3.push_back({"h" + std::to_string(g)});
    }
  const auto r3 = eval::worst_group(s3, l3, m3, {"h0", "h1", "h2"});
  exact = exact && r3.avg_acc == 0.8 && r3.worst_acc == 0.6 && std::abs(r3.gap - 0.2) < 1e-15;

  Rng rng(7);
  std::size_t negative_gaps = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 8 + uniform_index(rng, 200);
    std::vector<double> rs(n);
    std::vector<int> rl(n);
    std::vector<std::vector<std::string>> rm(n);
    for (std::size_t i = 0; i < n; ++i) {
      rs[i] = uniform01(rng);
      rl[i] = static_cast<int>(uniform_index(rng, 2));
      rm[i] = {"g" + std::to_string(i % 8)};
    }
    negative_gaps += eval::worst_group(rs, rl, rm, groups).gap < 0;
  }
  return {exact && negative_gaps == 0, "8-group (avg, worst, gap) = (" + fmt(r.avg_acc, 6) + ", " +
                                           fmt(r.worst_acc, 6) + ", " + fmt(r.gap, 6) + "), expected (" +
                                           fmt(expect_avg, 6) + ", " + fmt(expect_worst, 6) + ", " +
                                           fmt(expect_avg - expect_worst, 6) + "); 3-group (" + fmt(r3.avg_acc) +
                                           ", " + fmt(r3.worst_acc) + ", " + fmt(r3.gap) +
                                           "); negative gaps in 1000 random datasets: " +
                                           std::to_string(negative_gaps)};
}

// 8 ------------------------------------------------------------------------
Outcome throughput() {
  const auto t0 = Clock::now();
  RunConfig base;
  bench::BenchOptions opt;
  const auto res = bench::run_all(bench::default_variants(base), opt, [](const bench::VariantResult& r, std::size_t run) {
    std::cerr << "  bench " << r.name << " run " << run << ": " << fmt(r.steps_per_sec.back()) << " steps/s\n";
  });
  const double secs = seconds_since(t0);
  const auto& byte = res[0];
  const auto& gbst = res[1];
  const auto& head = res[2];
  // Speedups from steps paired within a round; stability as pairwise ratios
  // between repeated runs.
  std::vector<double> s1, s2;
  for (std::size_t k = 0; k < opt.runs; ++k) {
    s1.push_back(bench::paired_speedup(gbst, byte, k));
    s2.push_back(bench::paired_speedup(head, gbst, k));
  }
  const double r1 = std::accumulate(s1.begin(), s1.end(), 0.0) / static_cast<double>(opt.runs);
  const double r2 = std::accumulate(s2.begin(), s2.end(), 0.0) / static_cast<double>(opt.runs);
  double run_var = 0, ratio_var = 0;
  for (std::size_t k = 1; k < opt.runs; ++k) {
    for (const auto& r : res) run_var = std::max(run_var, std::abs(r.steps_per_sec[k] / r.steps_per_sec[0] - 1));
    ratio_var = std::max({ratio_var, std::abs(s1[k] / s1[0] - 1), std::abs(s2[k] / s2[0] - 1)});
  }
  std::ostringstream csv;
  bench::write_csv(csv, res);
  std::cerr << csv.str();
  return {r1 >= 1.2 && r2 >= 1.1 && run_var <= 0.10 && ratio_var <= 0.10 && secs < 600,
          "+GBST/byte " + fmt(r1, 3) + ", head/+GBST " + fmt(r2, 3) + ", run-to-run " + fmt(run_var * 100, 2) +
              "%, ratio-of-ratios " + fmt(ratio_var * 100, 2) + "%, total " + fmt(secs, 3) + " s"};
}

// 9 ------------------------------------------------------------------------
Outcome codeswitch_rule() {
  struct Case {
    robustness::LangSpanReport report;
    bool expected;
  };
  const std::vector<Case> cases = {
      {{{"en", 0.75}, {"es", 0.25}}, true},                     // exactly 25%
      {{{"en", 0.76}, {"es", 0.24}}, false},                    // just below
      {{{"en", 0.7500001}, {"es", 0.2499999}}, false},          // barely below
      {{{"en", 9.0 / 12}, {"pt", 3.0 / 12}}, true},             // 3 of 12 tokens
      {{{"en", 0.5}, {"es", 0.5}}, true},                       // even split
      {{{"en", 1.0}}, false},                                   // monolingual
      {{}, false},                                              // nothing identified
      {{{"en", 0.5}, {"es", 0.25}, {"fr", 0.25}}, true},        // 3 languages at the boundary
      {{{"en", 0.34}, {"es", 0.33}, {"fr", 0.33}}, true},       // 3-way split
      {{{"en", 0.6}, {"es", 0.2}, {"fr", 0.2}}, false},         // 3 languages, one qualifies
      {{{"en", 0.25}, {"es", 0.25}}, true},                     // half unidentified
      {{{"en", 0.24}, {"es", 0.24}, {"fr", 0.24}, {"de", 0.28}}, false},  // many small shares
  };
  std::size_t right = 0;
  std::string wrong;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (robustness::is_codeswitched(cases[i].report) == cases[i].expected) ++right;
    else wrong += " #" + std::to_string(i + 1);
  }
  return {right == cases.size(),
          std::to_string(right) + "/" + std::to_string(cases.size()) + " reports classified correctly" +
              (wrong.empty() ? "" : "; wrong:" + wrong)};
}

// 10 -----------------------------------------------------------------------
Outcome checkpoint_and_serving() {
  RunConfig cfg;
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.d_kv = 8;
  cfg.n_heads = 4;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 0;
  cfg.max_len = 128;
  UtcModel<double> model(cfg.architecture(), 10);
  model.attach_regression_head({"toxicity", "insult"}, 10);
  const auto dir = std::filesystem::temp_directory_path() / ("utc_acceptance_" + std::to_string(::getpid()));
  checkpoint::Metadata meta;
  meta.config = cfg.to_map();
  checkpoint::save((dir / "model").string(), model, meta);
  const auto loaded = checkpoint::load<double>((dir / "model").string());
  std::filesystem::remove_all(dir);

  Rng rng(10);
  std::vector<std::string> texts;
  for (int i = 0; i < 100; ++i) texts.push_back(random_text(1 + uniform_index(rng, 150), rng));
  bool params_exact = model.params().names() == loaded.params().names();
  for (const auto& n : model.params().names())
    params_exact = params_exact && model.params().at(n).value.data == loaded.params().at(n).value.data;
  std::size_t output_mismatch = 0;
  for (const auto& t : texts) output_mismatch += model.score_text(t) != loaded.score_text(t);

  serve::ScoreServer<double> server(loaded, {});
  const int port = server.start();
  httplib::Client cli("127.0.0.1", port);
  double serve_diff = 0;
  std::size_t serve_errors = 0;
  for (const auto& t : texts) {
    auto r = cli.Post("/score", nlohmann::json{{"text", t}}.dump(), "application/json");
    if (!r || r->status != 200) {
      ++serve_errors;
      continue;
    }
    const auto j = nlohmann::json::parse(r->body);
    const auto want = loaded.score_text(t);
    serve_diff = std::max({serve_diff, std::abs(j["scores"]["toxicity"].get<double>() - want[0]),
                           std::abs(j["scores"]["insult"].get<double>() - want[1])});
  }
  std::vector<std::future<std::string>> futs;
  for (int i = 0; i < 100; ++i) {
    futs.push_back(std::async(std::launch::async, [port] {
      httplib::Client c("127.0.0.1", port);
      auto r = c.Post("/score", R"({"text": "the same request, one hundred times"})", "application/json");
      if (!r || r->status != 200) return std::string("error");
      return nlohmann::json::parse(r->body)["scores"].dump();
    }));
  }
  std::set<std::string> distinct;
  std::size_t concurrent_errors = 0;
  for (auto& f : futs) {
    const auto s = f.get();
    concurrent_errors += s == "error";
    distinct.insert(s);
  }
  const auto stats = nlohmann::json::parse(cli.Get("/stats")->body);
  server.stop();
  const bool counted = stats["requests"] == 200;
  return {params_exact && output_mismatch == 0 && serve_errors == 0 && serve_diff <= 1e-6 &&
              concurrent_errors == 0 && distinct.size() == 1 && counted,
          std::string("round-trip ") + (params_exact && output_mismatch == 0 ? "bit-exact" : "MISMATCH") +
              "; serve vs score max diff " + fmt(serve_diff, 3) + " on 100 texts; 100 concurrent: " +
              std::to_string(distinct.size()) + " distinct response(s), " + std::to_string(concurrent_errors) +
              " errors; stats requests " + stats["requests"].dump()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness through the full graph", gradient_correctness},
      {"GBST length, simplex and saturation laws", gbst_laws},
      {"overfit smoke test", overfit_smoke},
      {"span-corruption statistics and reconstruction", span_statistics},
      {"obfuscation statistics", obfuscation_statistics},
      {"metric oracle equivalence", metric_oracles},
      {"worst-group arithmetic", worst_group_arithmetic},
      {"throughput ablation", throughput},
      {"code-switch filter rule", codeswitch_rule},
      {"checkpoint and serving integrity", checkpoint_and_serving},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed ? 1 : 0;
}
