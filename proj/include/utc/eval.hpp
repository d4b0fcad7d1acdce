#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "utc/dataset.hpp"

namespace utc::eval {

/// Mann-Whitney AUC: P(random positive outscores random negative), ties
/// counted one half. nullopt when either class is missing.
inline std::optional<double> auc_roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc_roc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // twice the U statistic, accumulated exactly in integers
  std::uint64_t twice_u = 0, neg_below = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] != 0 && labels[order[j]] != 1) throw std::invalid_argument("auc_roc: labels must be 0 or 1");
      (labels[order[j]] ? pos : neg) += 1;
      ++j;
    }
    twice_u += 2 * pos * neg_below + pos * neg;
    neg_below += neg;
    n_pos += pos;
    n_neg += neg;
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct ThresholdMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0, f1_positive = 0, f1_negative = 0, macro_f1 = 0;
};

/// Predicts positive when score >= threshold. F1 with an empty denominator is 0.
inline ThresholdMetrics threshold_metrics(std::span<const double> scores, std::span<const int> labels,
                                          double threshold = 0.5) {
  if (scores.size() != labels.size()) throw std::invalid_argument("threshold_metrics: length mismatch");
  if (scores.empty()) throw std::invalid_argument("threshold_metrics: empty input");
  ThresholdMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("threshold_metrics: labels must be 0 or 1");
    if (pred && labels[i]) ++m.tp;
    else if (pred) ++m.fp;
    else if (labels[i]) ++m.fn;
    else ++m.tn;
  }
  auto f1 = [](std::size_t tp, std::size_t fp, std::size_t fn) {
    const std::size_t d = 2 * tp + fp + fn;
    return d ? 2.0 * static_cast<double>(tp) / static_cast<double>(d) : 0.0;
  };
  m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(scores.size());
  m.f1_positive = f1(m.tp, m.fp, m.fn);
  m.f1_negative = f1(m.tn, m.fn, m.fp);
  m.macro_f1 = (m.f1_positive + m.f1_negative) / 2.0;
  return m;
}

struct WorstGroupResult {
  double avg_acc = 0, worst_acc = 0, gap = 0;
  std::string worst_group;
  std::map<std::string, double> group_acc;
  std::map<std::string, std::size_t> group_size;
  std::vector<std::string> warnings;
};

/// avg over all examples, worst over the named groups (membership per
/// example), gap = avg - worst. Empty groups are skipped with a warning.
inline WorstGroupResult worst_group(std::span<const double> scores, std::span<const int> labels,
                                    const std::vector<std::vector<std::string>>& membership,
                                    const std::vector<std::string>& groups, double threshold = 0.5) {
  if (membership.size() != scores.size()) throw std::invalid_argument("worst_group: membership length mismatch");
  WorstGroupResult r;
  r.avg_acc = threshold_metrics(scores, labels, threshold).accuracy;
  bool any = false;
  for (const auto& g : groups) {
    std::size_t n = 0, correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (std::find(membership[i].begin(), membership[i].end(), g) == membership[i].end()) continue;
      ++n;
      correct += (scores[i] >= threshold) == (labels[i] == 1);
    }
    if (n == 0) {
      r.warnings.push_back("group " + g + " has no examples; excluded");
      continue;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(n);
    r.group_acc[g] = acc;
    r.group_size[g] = n;
    if (!any || acc < r.worst_acc) {
      r.worst_acc = acc;
      r.worst_group = g;
    }
    any = true;
  }
  if (!any) throw std::invalid_argument("worst_group: every group is empty");
  r.gap = r.avg_acc - r.worst_acc;
  return r;
}

struct BiasTriplet {
  std::string subgroup, lang;
  std::optional<double> subgroup_auc, bpsn_auc, bnsp_auc;
  std::size_t subgroup_size = 0;
};

/// Subgroup AUC, background-positive/subgroup-negative AUC and
/// background-negative/subgroup-positive AUC.
inline BiasTriplet bias_triplet(std::span<const double> scores, std::span<const int> labels,
                                const std::vector<bool>& in_subgroup) {
  if (in_subgroup.size() != scores.size() || labels.size() != scores.size()) {
    throw std::invalid_argument("bias_triplet: length mismatch");
  }
  std::vector<double> s_sub, s_bpsn, s_bnsp;
  std::vector<int> l_sub, l_bpsn, l_bnsp;
  BiasTriplet t;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool sub = in_subgroup[i], pos = labels[i] == 1;
    if (sub) {
      ++t.subgroup_size;
      s_sub.push_back(scores[i]);
      l_sub.push_back(labels[i]);
    }
    if ((!sub && pos) || (sub && !pos)) {
      s_bpsn.push_back(scores[i]);
      l_bpsn.push_back(labels[i]);
    }
    if ((!sub && !pos) || (sub && pos)) {
      s_bnsp.push_back(scores[i]);
      l_bnsp.push_back(labels[i]);
    }
  }
  t.subgroup_auc = auc_roc(s_sub, l_sub);
  t.bpsn_auc = auc_roc(s_bpsn, l_bpsn);
  t.bnsp_auc = auc_roc(s_bnsp, l_bnsp);
  return t;
}

// ---- template-based bias sets ---------------------------------------------

struct BiasTemplate {
  std::string text;  // contains "{term}"
  int label = 0;
  std::string lang;  // empty: any language
};

struct IdentityTerm {
  std::string term, subgroup, lang;
};

/// Every template crossed with every identity term of a matching language.
inline std::vector<LabeledExample> expand_templates(const std::vector<BiasTemplate>& templates,
                                                    const std::vector<IdentityTerm>& terms,
                                                    const std::string& attribute = "toxicity") {
  std::vector<LabeledExample> out;
  for (const auto& tpl : templates) {
    const auto slot = tpl.text.find("{term}");
    if (slot == std::string::npos) throw std::invalid_argument("template lacks a {term} slot: " + tpl.text);
    for (const auto& term : terms) {
      if (!tpl.lang.empty() && !term.lang.empty() && tpl.lang != term.lang) continue;
      LabeledExample ex;
      ex.text = tpl.text.substr(0, slot) + term.term + tpl.text.substr(slot + 6);
      ex.labels[attribute] = tpl.label;
      const std::string lang = term.lang.empty() ? tpl.lang : term.lang;
      if (!lang.empty()) ex.lang = lang;
      ex.subgroups = {term.subgroup};
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---- reports ---------------------------------------------------------------

/// Flat slice/metric table; undefined values are kept as such.
class EvalReport {
 public:
  struct Row {
    std::string slice, metric;
    std::optional<double> value;
    std::size_t count = 0;
  };

  void add(std::string slice, std::string metric, std::optional<double> value, std::size_t count) {
    rows_.push_back({std::move(slice), std::move(metric), value, count});
  }
  void warn(std::string w) { warnings_.push_back(std::move(w)); }

  const std::vector<Row>& rows() const { return rows_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  std::optional<double> get(const std::string& slice, const std::string& metric) const {
    for (const auto& r : rows_)
      if (r.slice == slice && r.metric == metric) return r.value;
    throw std::out_of_range("no metric " + metric + " for slice " + slice);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["slices"] = nlohmann::json::object();
    for (const auto& r : rows_) {
      auto& slot = j["slices"][r.slice][r.metric];
      slot["count"] = r.count;
      if (r.value) slot["value"] = *r.value;
      else slot["value"] = "undefined";
    }
    j["warnings"] = warnings_;
    return j;
  }

  void write_csv(std::ostream& out) const {
    out << "slice,metric,value,count\n";
    out.precision(17);
    for (const auto& r : rows_) {
      out << csv_field(r.slice) << ',' << csv_field(r.metric) << ',';
      if (r.value) out << *r.value;
      else out << "undefined";
      out << ',' << r.count << '\n';
    }
  }

 private:
  std::vector<Row> rows_;
  std::vector<std::string> warnings_;

  static std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + '"';
  }
};

struct EvalOptions {
  std::string attribute = "toxicity";
  double threshold = 0.5;
  std::vector<std::string> groups;  // worst-group subpopulations; empty: all subgroup tags seen
};

/// Labels are binarized at 0.5; examples lacking the label or a score are skipped.
inline EvalReport evaluate(const std::vector<LabeledExample>& examples, const EvalOptions& opt) {
  EvalReport report;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<const LabeledExample*> used;
  std::size_t skipped = 0;
  for (const auto& ex : examples) {
    auto it = ex.labels.find(opt.attribute);
    auto s = ex.score_for(opt.attribute);
    if (it == ex.labels.end() || !s) {
      ++skipped;
      continue;
    }
    scores.push_back(*s);
    labels.push_back(it->second >= 0.5 ? 1 : 0);
    used.push_back(&ex);
  }
  if (skipped) report.warn(std::to_string(skipped) + " examples lack a label or score for " + opt.attribute);
  if (used.empty()) {
    report.warn("nothing to evaluate");
    return report;
  }
  const std::size_t n = used.size();
  report.add("overall", "auc", auc_roc(scores, labels), n);
  const auto tm = threshold_metrics(scores, labels, opt.threshold);
  report.add("overall", "accuracy", tm.accuracy, n);
  report.add("overall", "f1_positive", tm.f1_positive, n);
  report.add("overall", "f1_negative", tm.f1_negative, n);
  report.add("overall", "macro_f1", tm.macro_f1, n);

  std::map<std::string, std::vector<std::size_t>> by_lang;
  std::set<std::string> tags;
  for (std::size_t i = 0; i < n; ++i) {
    if (used[i]->lang) by_lang[*used[i]->lang].push_back(i);
    for (const auto& g : used[i]->subgroups) tags.insert(g);
  }
  auto subset = [&](const std::vector<std::size_t>& idx) {
    std::pair<std::vector<double>, std::vector<int>> out;
    for (auto i : idx) {
      out.first.push_back(scores[i]);
      out.second.push_back(labels[i]);
    }
    return out;
  };
  for (const auto& [lang, idx] : by_lang) {
    auto [s, l] = subset(idx);
    report.add("lang=" + lang, "auc", auc_roc(s, l), idx.size());
    report.add("lang=" + lang, "accuracy", threshold_metrics(s, l, opt.threshold).accuracy, idx.size());
  }

  std::vector<std::string> groups = opt.groups;
  if (groups.empty()) groups.assign(tags.begin(), tags.end());
  if (!groups.empty()) {
    std::vector<std::vector<std::string>> membership;
    for (auto* ex : used) membership.push_back(ex->subgroups);
    try {
      auto wg = worst_group(scores, labels, membership, groups, opt.threshold);
      report.add("overall", "avg_acc", wg.avg_acc, n);
      report.add("overall", "worst_group_acc", wg.worst_acc, wg.group_size[wg.worst_group]);
      report.add("overall", "worst_group_gap", wg.gap, n);
      for (const auto& [g, acc] : wg.group_acc) report.add("group=" + g, "accuracy", acc, wg.group_size[g]);
      for (auto& w : wg.warnings) report.warn(w);
    } catch (const std::invalid_argument& e) {
      report.warn(e.what());
    }
  }

  // bias triplets per subgroup and language ("*" = all languages)
  std::map<std::string, std::vector<std::size_t>> lang_slices = by_lang;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  lang_slices["*"] = all;
  for (const auto& g : tags) {
    for (const auto& [lang, idx] : lang_slices) {
      auto [s, l] = subset(idx);
      std::vector<bool> in;
      for (auto i : idx) in.push_back(used[i]->has_subgroup(g));
      auto t = bias_triplet(s, l, in);
      const std::string slice = "subgroup=" + g + ";lang=" + lang;
      report.add(slice, "subgroup_auc", t.subgroup_auc, t.subgroup_size);
      report.add(slice, "bpsn_auc", t.bpsn_auc, idx.size());
      report.add(slice, "bnsp_auc", t.bnsp_auc, idx.size());
    }
  }
  return report;
}

}  // namespace utc::eval
