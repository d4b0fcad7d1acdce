// utc: command-line front end for training, scoring, evaluation and serving.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "utc/bench.hpp"
#include "utc/checkpoint.hpp"
#include "utc/config.hpp"
#include "utc/dataset.hpp"
#include "utc/eval.hpp"
#include "utc/robustness.hpp"
#include "utc/serve.hpp"
#include "utc/train.hpp"

#ifndef UTC_DATA_DIR
#define UTC_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace utc;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string precision;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : RunConfig::load(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.precision.empty()) cfg.precision = g.precision;
  cfg.validate();
  return cfg;
}

template <class F>
int with_precision(const RunConfig& cfg, F&& f) {
  return cfg.precision == "f64" ? f.template operator()<double>() : f.template operator()<float>();
}

/// Writes to `path`, or stdout when empty or "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty() && path != "-") {
      if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
      file_.open(path, std::ios::binary);
      if (!file_) throw std::runtime_error("cannot write " + path);
    }
  }
  std::ostream& operator*() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

std::vector<LabeledExample> read_examples(const std::string& path) {
  if (path == "-") return parse_jsonl(std::cin);
  return read_jsonl(path);
}

pretrain::CorpusMixture load_mixture(const RunConfig& cfg) {
  if (cfg.corpora.empty()) throw std::invalid_argument("no pretraining corpora (config key corpora or --corpus)");
  std::vector<pretrain::Corpus> cs;
  for (std::size_t i = 0; i < cfg.corpora.size(); ++i) {
    const auto& spec = cfg.corpora[i];
    const auto colon = spec.find(':');
    const std::string text = spec.substr(0, colon);
    const std::string langs = colon == std::string::npos ? "" : spec.substr(colon + 1);
    const double w = cfg.corpus_weights.empty() ? 1.0 : cfg.corpus_weights[i];
    cs.push_back(pretrain::load_corpus(fs::path(text).stem().string(), text, langs, w));
  }
  return pretrain::CorpusMixture(std::move(cs));
}

template <class T>
train::Hooks<T> run_hooks(const RunConfig& cfg, std::ostream& log, std::string* last_ckpt) {
  train::Hooks<T> h;
  h.on_log = [&log](const train::LossRecord& r) {
    log << "step " << r.step << " loss " << r.loss << " lr " << r.lr << " grad_norm " << r.grad_norm << '\n';
  };
  h.on_checkpoint = [cfg, last_ckpt](std::size_t step, const UtcModel<T>& m) {
    checkpoint::Metadata meta;
    meta.step = step;
    meta.config = cfg.to_map();
    const auto prefix = (fs::path(cfg.output_dir) / ("ckpt-" + std::to_string(step))).string();
    checkpoint::save(prefix, m, meta);
    *last_ckpt = prefix;
  };
  return h;
}

int finish_training(const RunConfig& cfg, const train::TrainResult& r, const std::string& last_ckpt) {
  fs::create_directories(cfg.output_dir);
  std::ofstream csv(fs::path(cfg.output_dir) / "loss.csv");
  csv.precision(10);
  csv << "step,loss,lr,grad_norm\n";
  for (const auto& rec : r.log) csv << rec.step << ',' << rec.loss << ',' << rec.lr << ',' << rec.grad_norm << '\n';
  if (r.diverged) {
    std::cerr << "training diverged: " << r.message << '\n';
    if (!last_ckpt.empty()) std::cerr << "last good checkpoint: " << last_ckpt << '\n';
    return 2;
  }
  std::cerr << "finished " << r.steps_completed << " steps; checkpoint " << last_ckpt << '\n';
  return 0;
}

void warn_truncation(const std::vector<LabeledExample>& ex, std::size_t max_len) {
  for (std::size_t i = 0; i < ex.size(); ++i)
    if (ex[i].text.size() + 2 > max_len)
      std::cerr << "note: example " << i << " truncated from " << ex[i].text.size() << " to " << max_len - 2
                << " bytes\n";
}

template <class T>
void attach_scores(const UtcModel<T>& model, std::vector<LabeledExample>& ex) {
  const auto& attrs = model.arch().attributes;
  for (auto& e : ex) {
    const auto s = model.score_text(e.text);
    for (std::size_t a = 0; a < attrs.size(); ++a) e.scores[attrs[a]] = static_cast<double>(s[a]);
  }
}

void write_report(const eval::EvalReport& rep, const std::string& out_prefix) {
  if (out_prefix.empty()) {
    std::cout << rep.to_json().dump(2) << '\n';
    return;
  }
  Output j(out_prefix + ".json");
  *j << rep.to_json().dump(2) << '\n';
  Output c(out_prefix + ".csv");
  rep.write_csv(*c);
}

robustness::ObfuscationDictionary load_dictionary(const std::string& path) {
  return path.empty() ? robustness::ObfuscationDictionary::builtin() : robustness::ObfuscationDictionary::load(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Byte-level toxicity classifier: pretrain, finetune, score, evaluate and serve"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "flat key = value run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "span-corruption pretraining of encoder and decoder");
  std::vector<std::string> corpora;
  std::string out_dir;
  std::optional<std::size_t> steps;
  pre->add_option("--corpus", corpora, "corpus text file, optionally path:lang_sidecar (repeatable)");
  pre->add_option("--output-dir", out_dir, "checkpoint directory");
  pre->add_option("--steps", steps, "overrides max_steps");

  // finetune
  auto* ft = app.add_subcommand("finetune", "drop the decoder, attach a regression head and finetune");
  std::string init_ckpt, train_path;
  ft->add_option("--init", init_ckpt, "source checkpoint prefix")->required();
  ft->add_option("--train", train_path, "training JSONL (default: config train_data)");
  ft->add_option("--output-dir", out_dir, "checkpoint directory");
  ft->add_option("--steps", steps, "overrides max_steps");

  // score
  auto* sc = app.add_subcommand("score", "score texts with a finetuned checkpoint");
  std::string ckpt, input, output, text;
  std::size_t score_batch = 32;
  sc->add_option("--checkpoint", ckpt, "checkpoint prefix")->required();
  auto* sc_in = sc->add_option("--input", input, "JSONL input, '-' for stdin");
  sc->add_option("--text", text, "single text")->excludes(sc_in);
  sc->add_option("--output", output, "JSONL output (default stdout)");
  sc->add_option("--batch-size", score_batch, "examples per scoring batch")->check(CLI::PositiveNumber);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "AUC, F1, per-language and worst-group slices");
  std::string attribute = "toxicity";
  double threshold = 0.5;
  std::vector<std::string> groups;
  ev->add_option("--input", input, "JSONL with labels (and scores unless --checkpoint)")->required();
  ev->add_option("--checkpoint", ckpt, "score the input with this checkpoint first");
  ev->add_option("--attribute", attribute);
  ev->add_option("--threshold", threshold);
  ev->add_option("--groups", groups, "worst-group subpopulations (default: every subgroup tag)");
  ev->add_option("--output", output, "report prefix; writes <prefix>.json and <prefix>.csv");

  // obfuscate
  auto* ob = app.add_subcommand("obfuscate", "character-substitution obfuscation");
  std::optional<double> rate;
  std::string dict_path;
  ob->add_option("--input", input, "JSONL input, '-' for stdin")->required();
  ob->add_option("--rate", rate, "substitution rate in [0,1]; omit for the 0..50% sweep")->check(CLI::Range(0.0, 1.0));
  ob->add_option("--dictionary", dict_path, "substitution TSV (default: bundled)");
  ob->add_option("--output", output, "JSONL output, or a directory for the sweep");

  // codeswitch
  auto* cs = app.add_subcommand("codeswitch", "keep texts with >= threshold of each of >= 2 languages");
  std::string langid_dir = std::string(UTC_DATA_DIR) + "/langid";
  double cs_threshold = 0.25;
  std::size_t min_langs = 2;
  bool with_reports = false;
  cs->add_option("--input", input, "JSONL input, '-' for stdin")->required();
  cs->add_option("--langid-dir", langid_dir, "directory of <lang>.txt seed texts");
  cs->add_option("--threshold", cs_threshold);
  cs->add_option("--min-langs", min_langs);
  cs->add_flag("--reports", with_reports, "emit every example with its language fractions instead of filtering");
  cs->add_option("--output", output, "JSONL output (default stdout)");

  // bias-report
  auto* br = app.add_subcommand("bias-report", "subgroup, BPSN and BNSP AUC over templated examples");
  std::string templates_path;
  br->add_option("--templates", templates_path, "JSON {templates:[{text,label,lang}], terms:[{term,subgroup,lang}]}");
  br->add_option("--input", input, "pre-built JSONL with subgroups (alternative to --templates)");
  br->add_option("--checkpoint", ckpt, "score examples with this checkpoint");
  br->add_option("--attribute", attribute);
  br->add_option("--output", output, "report prefix; writes <prefix>.json and <prefix>.csv");

  // bench
  auto* be = app.add_subcommand("bench", "finetuning throughput per architecture variant");
  bench::BenchOptions bopt;
  std::vector<std::string> variants;
  be->add_option("--length", bopt.input_bytes, "input bytes");
  be->add_option("--batch", bopt.batch);
  be->add_option("--steps", bopt.steps, "timed steps per run");
  be->add_option("--warmup", bopt.warmup_steps, "untimed steps per run");
  be->add_option("--runs", bopt.runs);
  be->add_option("--variants", variants, "subset of byte_baseline, gbst_ds2, gbst_regression_head, scaled_up");
  be->add_option("--output", output, "CSV output (default stdout)");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP scoring endpoint: POST /score, GET /stats");
  std::string host = "127.0.0.1";
  int port = 8080;
  serve::BatcherOptions sopt;
  long max_wait_ms = 5;
  sv->add_option("--checkpoint", ckpt, "checkpoint prefix")->required();
  sv->add_option("--host", host);
  sv->add_option("--port", port);
  sv->add_option("--max-batch", sopt.max_batch)->check(CLI::PositiveNumber);
  sv->add_option("--max-wait-ms", max_wait_ms)->check(CLI::NonNegativeNumber);
  sv->add_option("--max-queue", sopt.max_queue)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = resolve_config(g);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (steps) cfg.max_steps = *steps;

    if (*pre) {
      if (!corpora.empty()) {
        cfg.corpora = corpora;
        cfg.corpus_weights.clear();
      }
      cfg.validate();
      const auto mix = load_mixture(cfg);
      return with_precision(cfg, [&]<class T>() {
        UtcModel<T> model(cfg.architecture(), cfg.seed);
        std::string last;
        auto r = train::pretrain(model, mix, cfg, run_hooks<T>(cfg, std::cerr, &last));
        return finish_training(cfg, r, last);
      });
    }

    if (*ft) {
      RunConfig fcfg = cfg;
      fcfg.lr_schedule = "constant";
      fcfg.learning_rate = cfg.finetune_learning_rate;
      fcfg.dropout = cfg.finetune_dropout;
      const std::string path = train_path.empty() ? cfg.train_data : train_path;
      if (path.empty()) throw std::invalid_argument("no training data (--train or config train_data)");
      const auto data = read_examples(path);
      return with_precision(fcfg, [&]<class T>() {
        auto model = checkpoint::load<T>(init_ckpt);
        if (model.arch().has_decoder()) model.remove_decoder();
        model.attach_regression_head(fcfg.attributes, fcfg.seed);
        warn_truncation(data, model.arch().max_len);
        std::string last;
        auto r = train::finetune(model, data, fcfg, run_hooks<T>(fcfg, std::cerr, &last));
        return finish_training(fcfg, r, last);
      });
    }

    if (*sc) {
      std::vector<LabeledExample> ex;
      if (!text.empty() || input.empty()) ex.push_back(LabeledExample{text});
      else ex = read_examples(input);
      return with_precision(cfg, [&]<class T>() {
        const auto model = checkpoint::load<T>(ckpt);
        if (!model.arch().has_head()) throw std::invalid_argument("checkpoint has no regression head");
        warn_truncation(ex, model.arch().max_len);
        Output out(output);
        for (std::size_t start = 0; start < ex.size(); start += score_batch) {
          std::vector<LabeledExample> chunk(ex.begin() + start, ex.begin() + std::min(ex.size(), start + score_batch));
          attach_scores(model, chunk);
          write_jsonl(*out, chunk);
        }
        return 0;
      });
    }

    if (*ev) {
      auto ex = read_examples(input);
      if (!ckpt.empty()) {
        with_precision(cfg, [&]<class T>() {
          attach_scores(checkpoint::load<T>(ckpt), ex);
          return 0;
        });
      }
      eval::EvalOptions opt;
      opt.attribute = attribute;
      opt.threshold = threshold;
      opt.groups = groups;
      write_report(eval::evaluate(ex, opt), output);
      return 0;
    }

    if (*ob) {
      const auto ex = read_examples(input);
      const auto dict = load_dictionary(dict_path);
      if (rate) {
        const auto res = robustness::sweep_obfuscation(ex, {*rate}, dict, cfg.seed);
        Output out(output);
        write_jsonl(*out, res[0].examples);
        std::cerr << "substituted " << res[0].stats.substituted << " of " << res[0].stats.alphabetic
                  << " letters\n";
        return 0;
      }
      const auto sweep = robustness::sweep_obfuscation(ex, robustness::default_sweep_rates(), dict, cfg.seed);
      if (!output.empty()) fs::create_directories(output);
      std::cout << "rate,alphabetic,substituted,fraction\n";
      for (const auto& r : sweep) {
        const double frac = r.stats.alphabetic ? static_cast<double>(r.stats.substituted) / r.stats.alphabetic : 0.0;
        std::cout << r.rate << ',' << r.stats.alphabetic << ',' << r.stats.substituted << ',' << frac << '\n';
        if (!output.empty()) {
          const int pct = static_cast<int>(std::lround(r.rate * 100));
          write_jsonl((fs::path(output) / ("obfuscated_" + std::to_string(pct) + ".jsonl")).string(), r.examples);
        }
      }
      return 0;
    }

    if (*cs) {
      const auto ex = read_examples(input);
      robustness::NgramLangId langid;
      langid.train_directory(langid_dir);
      Output out(output);
      std::size_t kept = 0;
      for (const auto& e : ex) {
        const auto rep = langid.identify(e.text);
        const bool sw = robustness::is_codeswitched(rep, cs_threshold, min_langs);
        kept += sw;
        if (with_reports) {
          auto j = example_to_json(e);
          j["languages"] = rep;
          j["codeswitched"] = sw;
          *out << j.dump() << '\n';
        } else if (sw) {
          *out << example_to_json(e).dump() << '\n';
        }
      }
      std::cerr << kept << " of " << ex.size() << " examples are code-switched\n";
      return 0;
    }

    if (*br) {
      std::vector<LabeledExample> ex;
      if (!templates_path.empty()) {
        std::ifstream in(templates_path);
        if (!in) throw std::runtime_error("cannot open " + templates_path);
        const auto j = json::parse(in);
        std::vector<eval::BiasTemplate> tpls;
        std::vector<eval::IdentityTerm> terms;
        for (const auto& t : j.at("templates")) tpls.push_back({t.at("text"), t.at("label"), t.value("lang", "")});
        for (const auto& t : j.at("terms")) terms.push_back({t.at("term"), t.at("subgroup"), t.value("lang", "")});
        ex = eval::expand_templates(tpls, terms, attribute);
      } else if (!input.empty()) {
        ex = read_examples(input);
      } else {
        throw std::invalid_argument("bias-report needs --templates or --input");
      }
      if (!ckpt.empty()) {
        with_precision(cfg, [&]<class T>() {
          attach_scores(checkpoint::load<T>(ckpt), ex);
          return 0;
        });
      }
      eval::EvalOptions opt;
      opt.attribute = attribute;
      write_report(eval::evaluate(ex, opt), output);
      return 0;
    }

    if (*be) {
      bopt.seed = cfg.seed;
      auto all = bench::default_variants(cfg);
      std::vector<bench::Variant> chosen;
      for (const auto& v : all)
        if (variants.empty() || std::find(variants.begin(), variants.end(), v.name) != variants.end())
          chosen.push_back(v);
      if (chosen.empty()) throw std::invalid_argument("no matching bench variants");
      const auto results = bench::run_all(chosen, bopt, [](const bench::VariantResult& r, std::size_t run) {
        std::cerr << r.name << " run " << run << ": " << r.steps_per_sec.back() << " steps/s\n";
      });
      Output out(output);
      bench::write_csv(*out, results);
      return 0;
    }

    if (*sv) {
      sopt.max_wait = std::chrono::milliseconds(max_wait_ms);
      return with_precision(cfg, [&]<class T>() {
        const auto model = checkpoint::load<T>(ckpt);
        if (!model.arch().has_head()) throw std::invalid_argument("checkpoint has no regression head");
        serve::ScoreServer<T> server(model, sopt);
        std::cerr << "serving on http://" << host << ':' << port << '\n';
        server.run(host, port);
        return 0;
      });
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
