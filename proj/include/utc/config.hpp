#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "utc/model.hpp"
#include "utc/pretrain.hpp"

namespace utc {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed parsing assumes 64-bit size_t");

/// Flat key = value run configuration. '#' starts a comment; unknown keys are
/// rejected. The same text form is embedded in every checkpoint.
struct RunConfig {
  // model
  std::size_t d_model = 64, d_ff = 256, d_kv = 16, n_heads = 4, n_enc_layers = 4, n_dec_layers = 2;
  std::size_t rel_bias_buckets = 32, rel_bias_max_distance = 128;
  bool use_gbst = true;
  std::size_t gbst_max_block = 4, gbst_conv_width = 5, downsample = 2;
  std::size_t max_len = 512, num_sentinels = 32;
  std::vector<std::string> attributes{"toxicity"};
  // optimization
  std::string lr_schedule = "inverse_sqrt";  // inverse_sqrt | constant
  double learning_rate = 1e-3;               // constant schedule value
  std::size_t warmup_steps = 1000;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  double dropout = 0.0;
  double clip_norm = 1.0;  // global gradient norm clip; 0 disables
  double finetune_learning_rate = 1e-3, finetune_dropout = 0.1;  // finetune: constant schedule
  // pretraining data
  double corruption_rate = 0.15, mean_span_len = 20.0;
  std::size_t target_len = 0;
  // data
  std::vector<std::string> corpora;  // text files; "path" or "path:langs_path"
  std::vector<double> corpus_weights;
  std::string train_data, eval_data;
  // run
  std::uint64_t seed = 0;
  std::size_t batch_size = 32, max_steps = 1000, checkpoint_every = 500, log_every = 50;
  std::string output_dir = "run";
  std::string precision = "f32";

  template <class F>
  void visit(F&& f) {
    f("d_model", d_model);
    f("d_ff", d_ff);
    f("d_kv", d_kv);
    f("n_heads", n_heads);
    f("n_enc_layers", n_enc_layers);
    f("n_dec_layers", n_dec_layers);
    f("rel_bias_buckets", rel_bias_buckets);
    f("rel_bias_max_distance", rel_bias_max_distance);
    f("use_gbst", use_gbst);
    f("gbst_max_block", gbst_max_block);
    f("gbst_conv_width", gbst_conv_width);
    f("downsample", downsample);
    f("max_len", max_len);
    f("num_sentinels", num_sentinels);
    f("attributes", attributes);
    f("lr_schedule", lr_schedule);
    f("learning_rate", learning_rate);
    f("warmup_steps", warmup_steps);
    f("adam_beta1", adam_beta1);
    f("adam_beta2", adam_beta2);
    f("adam_eps", adam_eps);
    f("dropout", dropout);
    f("clip_norm", clip_norm);
    f("finetune_learning_rate", finetune_learning_rate);
    f("finetune_dropout", finetune_dropout);
    f("corruption_rate", corruption_rate);
    f("mean_span_len", mean_span_len);
    f("target_len", target_len);
    f("corpora", corpora);
    f("corpus_weights", corpus_weights);
    f("train_data", train_data);
    f("eval_data", eval_data);
    f("seed", seed);
    f("batch_size", batch_size);
    f("max_steps", max_steps);
    f("checkpoint_every", checkpoint_every);
    f("log_every", log_every);
    f("output_dir", output_dir);
    f("precision", precision);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<RunConfig*>(this)->visit([&](const char* k, auto& v) { f(k, std::as_const(v)); });
  }

  void set(const std::string& key, const std::string& value) {
    bool found = false;
    visit([&](const char* k, auto& field) {
      if (key != k) return;
      found = true;
      try {
        parse_value(value, field);
      } catch (const std::exception&) {
        throw std::invalid_argument("config: bad value for " + key + ": '" + value + "'");
      }
    });
    if (!found) throw std::invalid_argument("config: unknown key " + key);
  }

  static RunConfig parse(std::istream& in) {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      const auto key = trim(line.substr(0, eq));
      if (key.empty() && eq == std::string::npos) continue;
      if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
      cfg.set(key, trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    return parse(in);
  }

  std::string to_string() const {
    std::ostringstream out;
    visit([&](const char* k, const auto& v) { out << k << " = " << format_value(v) << '\n'; });
    return out.str();
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    visit([&](const char* k, const auto& v) { m[k] = format_value(v); });
    return m;
  }

  void validate() const {
    if (lr_schedule != "inverse_sqrt" && lr_schedule != "constant") {
      throw std::invalid_argument("config: lr_schedule must be inverse_sqrt or constant");
    }
    if (precision != "f32" && precision != "f64") throw std::invalid_argument("config: precision must be f32 or f64");
    if (!(dropout >= 0 && dropout < 1) || !(finetune_dropout >= 0 && finetune_dropout < 1)) {
      throw std::invalid_argument("config: dropout must be in [0, 1)");
    }
    if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
    if (!corpus_weights.empty() && corpus_weights.size() != corpora.size()) {
      throw std::invalid_argument("config: corpus_weights must match corpora");
    }
    architecture().validate();
  }

  Architecture architecture() const {
    Architecture a;
    a.model.d_model = d_model;
    a.model.d_ff = d_ff;
    a.model.d_kv = d_kv;
    a.model.n_heads = n_heads;
    a.model.n_enc_layers = n_enc_layers;
    a.model.n_dec_layers = n_dec_layers;
    a.model.dropout_rate = dropout;
    a.model.rel_bias_buckets = static_cast<int>(rel_bias_buckets);
    a.model.rel_bias_max_distance = static_cast<int>(rel_bias_max_distance);
    a.model.vocab_size = kByteVocabSize + num_sentinels;
    a.gbst.max_block = gbst_max_block;
    a.gbst.conv_width = gbst_conv_width;
    a.gbst.downsample = downsample;
    a.gbst.d_model = d_model;
    a.use_gbst = use_gbst;
    a.max_len = max_len;
    a.num_sentinels = num_sentinels;
    return a;
  }

  pretrain::SpanCorruptionConfig span_config() const {
    pretrain::SpanCorruptionConfig s;
    s.corruption_rate = corruption_rate;
    s.mean_span_len = mean_span_len;
    s.max_len = max_len;
    s.num_sentinels = num_sentinels;
    s.target_len = target_len;
    return s;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(v);
    while (std::getline(in, cur, ',')) {
      cur = trim(cur);
      if (!cur.empty()) out.push_back(cur);
    }
    return out;
  }

  static void parse_value(const std::string& v, std::size_t& out) {
    if (v.empty() || v[0] == '-') throw std::invalid_argument("negative");
    std::size_t pos = 0;
    out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
  }
  static void parse_value(const std::string& v, double& out) {
    std::size_t pos = 0;
    out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
  }
  static void parse_value(const std::string& v, bool& out) {
    if (v == "true" || v == "1") out = true;
    else if (v == "false" || v == "0") out = false;
    else throw std::invalid_argument("bool");
  }
  static void parse_value(const std::string& v, std::string& out) { out = v; }
  static void parse_value(const std::string& v, std::vector<std::string>& out) { out = split_list(v); }
  static void parse_value(const std::string& v, std::vector<double>& out) {
    out.clear();
    for (const auto& s : split_list(v)) {
      double d;
      parse_value(s, d);
      out.push_back(d);
    }
  }

  static std::string format_value(const std::string& v) { return v; }
  static std::string format_value(bool v) { return v ? "true" : "false"; }
  static std::string format_value(double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
  }
  template <class I>
    requires std::is_integral_v<I>
  static std::string format_value(I v) {
    return std::to_string(v);
  }
  static std::string format_value(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
  }
  static std::string format_value(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_value(v[i]);
    return s;
  }
};

}  // namespace utc
