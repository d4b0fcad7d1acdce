#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "utc/byte_frontend.hpp"
#include "utc/rng.hpp"

namespace utc::pretrain {

struct SpanCorruptionConfig {
  double corruption_rate = 0.15;
  double mean_span_len = 20.0;
  std::size_t max_len = 512;
  std::size_t num_sentinels = 32;  // ids kFirstSentinelId .. kFirstSentinelId + num_sentinels - 1
  std::size_t target_len = 0;      // 0: target padded to its own length

  void validate() const {
    if (!(corruption_rate > 0.0 && corruption_rate < 1.0)) throw std::invalid_argument("corruption rate must be in (0, 1)");
    if (!(mean_span_len >= 1.0)) throw std::invalid_argument("mean span length must be >= 1");
    if (num_sentinels < 1) throw std::invalid_argument("need at least one sentinel id");
    if (max_len < 2) throw std::invalid_argument("max_len must be at least 2");
  }
};

inline int sentinel_id(std::size_t k) { return kFirstSentinelId + static_cast<int>(k); }
inline bool is_sentinel(int id, std::size_t num_sentinels) {
  return id >= kFirstSentinelId && id < kFirstSentinelId + static_cast<int>(num_sentinels);
}

struct Span {
  std::size_t start = 0;  // index into the content bytes
  std::size_t length = 0;
};

struct SpanPlan {
  std::size_t noise = 0;
  std::vector<Span> spans;
};

namespace detail {

/// Uniform random composition of `total` into `parts` positive integers.
inline std::vector<std::size_t> random_composition(std::size_t total, std::size_t parts, Rng& rng) {
  if (parts == 0 || parts > total) throw std::invalid_argument("random_composition: need 1 <= parts <= total");
  // k-1 distinct cut points in 1..total-1 (Floyd's sampling)
  std::vector<std::size_t> cuts;
  const std::size_t n = total - 1, m = parts - 1;
  for (std::size_t j = n - m; j < n; ++j) {
    const std::size_t t = static_cast<std::size_t>(uniform_index(rng, j + 1)) + 1;
    if (std::find(cuts.begin(), cuts.end(), t) == cuts.end()) cuts.push_back(t);
    else cuts.push_back(j + 1);
  }
  std::sort(cuts.begin(), cuts.end());
  std::vector<std::size_t> out;
  std::size_t prev = 0;
  for (auto c : cuts) {
    out.push_back(c - prev);
    prev = c;
  }
  out.push_back(total - prev);
  return out;
}

}  // namespace detail

/// Chooses span lengths and placements over `n` content bytes. Spans never
/// overlap or touch; lengths sum to round(rate * n) (at least one byte).
inline SpanPlan plan_spans(std::size_t n, const SpanCorruptionConfig& cfg, Rng& rng) {
  cfg.validate();
  if (n == 0) throw std::invalid_argument("corrupt_spans: no content bytes");
  SpanPlan plan;
  plan.noise = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg.corruption_rate * n)), 1, n);
  const std::size_t keep = n - plan.noise;
  std::size_t k = static_cast<std::size_t>(std::llround(plan.noise / cfg.mean_span_len));
  k = std::clamp<std::size_t>(k, 1, std::min({plan.noise, cfg.num_sentinels, keep + 1}));
  const auto lengths = detail::random_composition(plan.noise, k, rng);
  // gaps g_0..g_k with inner gaps >= 1, outer >= 0: shift outer by one
  auto gaps = detail::random_composition(keep + 2, k + 1, rng);
  gaps.front() -= 1;
  gaps.back() -= 1;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < k; ++s) {
    pos += gaps[s];
    plan.spans.push_back({pos, lengths[s]});
    pos += lengths[s];
  }
  return plan;
}

struct CorruptedPair {
  ByteSequence input;
  ByteSequence target;
};

namespace detail {

/// [first, last) of the raw-byte content; throws if specials are interleaved.
inline std::pair<std::size_t, std::size_t> content_range(const ByteSequence& seq) {
  std::size_t first = seq.size(), last = 0;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (seq.mask[i] && is_raw_byte(seq.ids[i])) {
      first = std::min(first, i);
      last = i + 1;
    }
  if (first >= last) return {0, 0};
  for (std::size_t i = first; i < last; ++i)
    if (!seq.mask[i] || !is_raw_byte(seq.ids[i])) throw std::invalid_argument("corrupt_spans: content bytes must be contiguous");
  return {first, last};
}

}  // namespace detail

/// Replaces each planned span with its own sentinel. Target is
/// sentinel_0 span_0 sentinel_1 span_1 ... EOS.
inline CorruptedPair apply_spans(const ByteSequence& seq, const SpanPlan& plan, const SpanCorruptionConfig& cfg) {
  const auto [first, last] = detail::content_range(seq);
  std::vector<int> in, tgt;
  for (std::size_t i = 0; i < first; ++i)
    if (seq.mask[i]) in.push_back(seq.ids[i]);
  std::size_t cursor = 0;
  const std::size_t n = last - first;
  for (std::size_t s = 0; s < plan.spans.size(); ++s) {
    const auto& sp = plan.spans[s];
    if (sp.start < cursor || sp.start + sp.length > n || sp.length == 0) throw std::invalid_argument("apply_spans: bad plan");
    for (; cursor < sp.start; ++cursor) in.push_back(seq.ids[first + cursor]);
    in.push_back(sentinel_id(s));
    tgt.push_back(sentinel_id(s));
    for (std::size_t j = 0; j < sp.length; ++j) tgt.push_back(seq.ids[first + sp.start + j]);
    cursor = sp.start + sp.length;
  }
  for (; cursor < n; ++cursor) in.push_back(seq.ids[first + cursor]);
  for (std::size_t i = last; i < seq.size(); ++i)
    if (seq.mask[i]) in.push_back(seq.ids[i]);
  tgt.push_back(kEosId);
  CorruptedPair out;
  out.input = make_sequence(std::move(in), seq.size());
  out.input.original_length = seq.original_length;
  const std::size_t tlen = std::max(cfg.target_len, tgt.size());
  out.target = make_sequence(std::move(tgt), tlen);
  return out;
}

inline CorruptedPair corrupt_spans(const ByteSequence& seq, const SpanCorruptionConfig& cfg, Rng& rng) {
  const auto [first, last] = detail::content_range(seq);
  return apply_spans(seq, plan_spans(last - first, cfg, rng), cfg);
}

/// Inverse of corrupt_spans: substitutes target spans back at their sentinels.
inline std::vector<int> reconstruct(const ByteSequence& input, const ByteSequence& target, std::size_t num_sentinels) {
  std::map<int, std::vector<int>> spans;
  int current = -1;
  for (std::size_t i = 0; i < target.size() && target.mask[i]; ++i) {
    const int id = target.ids[i];
    if (id == kEosId) break;
    if (is_sentinel(id, num_sentinels)) {
      current = id;
      spans[id];
    } else if (current >= 0) {
      spans[current].push_back(id);
    }
  }
  std::vector<int> out;
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (!input.mask[i]) continue;
    const int id = input.ids[i];
    if (is_sentinel(id, num_sentinels)) {
      auto it = spans.find(id);
      if (it == spans.end()) throw std::invalid_argument("reconstruct: sentinel missing from target");
      out.insert(out.end(), it->second.begin(), it->second.end());
    } else {
      out.push_back(id);
    }
  }
  return out;
}

// ---- corpora -------------------------------------------------------------

struct Corpus {
  std::string name;
  std::vector<std::string> docs;
  std::vector<std::string> langs;  // empty, or one tag per doc
  double weight = 1.0;
  bool balance_languages = false;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

/// One document per line, optional sidecar with one language tag per line.
inline Corpus load_corpus(const std::string& name, const std::string& text_path, const std::string& lang_path = {},
                          double weight = 1.0) {
  Corpus c;
  c.name = name;
  c.weight = weight;
  c.docs = read_lines(text_path);
  if (!lang_path.empty()) {
    c.langs = read_lines(lang_path);
    if (c.langs.size() != c.docs.size()) {
      throw std::invalid_argument("language sidecar for " + name + " has " + std::to_string(c.langs.size()) +
                                  " lines, corpus has " + std::to_string(c.docs.size()));
    }
    c.balance_languages = true;
  }
  return c;
}

struct Draw {
  std::size_t corpus = 0;
  std::size_t doc = 0;
};

/// Weighted choice of corpus, then (optionally) uniform language, then doc.
class CorpusMixture {
 public:
  explicit CorpusMixture(std::vector<Corpus> corpora) : corpora_(std::move(corpora)) {
    if (corpora_.empty()) throw std::invalid_argument("mixture needs at least one corpus");
    double total = 0;
    for (const auto& c : corpora_) {
      if (c.docs.empty()) throw std::invalid_argument("corpus " + c.name + " is empty");
      if (!(c.weight > 0)) throw std::invalid_argument("corpus " + c.name + " needs a positive weight");
      if (c.balance_languages && c.langs.size() != c.docs.size()) {
        throw std::invalid_argument("corpus " + c.name + " is language-balanced but lacks tags");
      }
      total += c.weight;
    }
    double acc = 0;
    for (const auto& c : corpora_) {
      acc += c.weight / total;
      cumulative_.push_back(acc);
      std::map<std::string, std::vector<std::size_t>> by_lang;
      if (c.balance_languages)
        for (std::size_t i = 0; i < c.docs.size(); ++i) by_lang[c.langs[i]].push_back(i);
      std::vector<std::vector<std::size_t>> groups;
      for (auto& [_, idx] : by_lang) groups.push_back(std::move(idx));
      groups_.push_back(std::move(groups));
    }
    cumulative_.back() = 1.0;
  }

  const std::vector<Corpus>& corpora() const { return corpora_; }

  Draw draw(Rng& rng) const {
    const double u = uniform01(rng);
    std::size_t c = 0;
    while (c + 1 < cumulative_.size() && u >= cumulative_[c]) ++c;
    const auto& groups = groups_[c];
    if (groups.empty()) return {c, static_cast<std::size_t>(uniform_index(rng, corpora_[c].docs.size()))};
    const auto& g = groups[uniform_index(rng, groups.size())];
    return {c, g[uniform_index(rng, g.size())]};
  }

  const std::string& text(const Draw& d) const { return corpora_[d.corpus].docs[d.doc]; }

  std::vector<ByteSequence> sample_batch(std::size_t batch, std::size_t max_len, Rng& rng) const {
    std::vector<ByteSequence> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) out.push_back(encode_text(text(draw(rng)), max_len, false));
    return out;
  }

 private:
  std::vector<Corpus> corpora_;
  std::vector<double> cumulative_;
  std::vector<std::vector<std::vector<std::size_t>>> groups_;
};

/// Example i of batch `step` uses its own derived stream, so batches are
/// identical however the examples are distributed over workers.
inline std::vector<CorruptedPair> pretrain_batch(const CorpusMixture& mix, const SpanCorruptionConfig& cfg,
                                                 std::size_t batch, std::uint64_t seed, std::uint64_t step) {
  std::vector<CorruptedPair> out;
  out.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    Rng rng(derive_seed(seed, {0x7072657472ULL, step, i}));
    auto seq = encode_text(mix.text(mix.draw(rng)), cfg.max_len, false);
    if (seq.unpadded_length() < 2) {
      seq = encode_text(" ", cfg.max_len, false);
    }
    out.push_back(corrupt_spans(seq, cfg, rng));
  }
  return out;
}

}  // namespace utc::pretrain
