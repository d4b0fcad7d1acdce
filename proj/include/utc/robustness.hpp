#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "utc/dataset.hpp"
#include "utc/rng.hpp"

namespace utc::robustness {

// ---- obfuscation -----------------------------------------------------------

/// Letter a-z to its human-readable substitutes. An empty substitute deletes
/// the letter.
class ObfuscationDictionary {
 public:
  ObfuscationDictionary() = default;

  /// Tab-separated lines: letter, then substitutes. '#' starts a comment line.
  static ObfuscationDictionary parse(std::istream& in) {
    ObfuscationDictionary d;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> fields;
      std::size_t start = 0;
      for (;;) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
      }
      const std::string& key = fields[0];
      if (key.size() != 1 || key[0] < 'a' || key[0] > 'z') {
        throw std::invalid_argument("dictionary line " + std::to_string(lineno) + ": key must be a lowercase letter");
      }
      const char letter = key[0];
      fields.erase(fields.begin());
      d.set(letter, std::move(fields));
    }
    d.validate();
    return d;
  }

  static ObfuscationDictionary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return parse(in);
  }

  /// The bundled dictionary (same content as data/obfuscation_dictionary.tsv).
  static ObfuscationDictionary builtin() {
    std::istringstream in{std::string(kBuiltin)};
    return parse(in);
  }

  void set(char letter, std::vector<std::string> subs) {
    if (letter < 'a' || letter > 'z') throw std::invalid_argument("dictionary keys are lowercase letters");
    for (const auto& s : subs)
      if (s.size() == 1 && (s[0] == letter || s[0] == letter - 'a' + 'A')) {
        throw std::invalid_argument(std::string("substitute for '") + letter + "' equals the letter");
      }
    entries_[letter - 'a'] = std::move(subs);
  }

  const std::vector<std::string>& substitutes(char lower) const { return entries_.at(lower - 'a'); }
  bool has(char lower) const { return !entries_.at(lower - 'a').empty(); }

  /// Every letter needs at least one substitute.
  void validate() const {
    for (int c = 0; c < 26; ++c)
      if (entries_[c].empty()) throw std::invalid_argument(std::string("no substitutes for '") + char('a' + c) + "'");
  }

 private:
  std::array<std::vector<std::string>, 26> entries_;

  static constexpr std::string_view kBuiltin =
      "a\t4\t@\t/\\\t^\t*\t\n"
      "b\t8\t|3\t6\t\xc3\x9f\n"
      "c\t(\t<\t{\t\xc2\xa2\n"
      "d\t|)\tcl\t[)\n"
      "e\t3\t\xe2\x82\xac\t&\t*\t\n"
      "f\tph\t|=\t\xc6\x92\n"
      "g\t9\t6\t&\n"
      "h\t#\t|-|\t4\n"
      "i\t1\t!\t|\t*\t\n"
      "j\t_|\t;\n"
      "k\t|<\t|{\n"
      "l\t1\t|\t\xc2\xa3\n"
      "m\t|\\/|\t/\\/\\\tnn\n"
      "n\t|\\|\t/\\/\t^/\n"
      "o\t0\t()\t[]\t*\t\n"
      "p\t|*\t|o\t9\n"
      "q\t9\t0_\n"
      "r\t|2\t12\t\xc2\xae\n"
      "s\t5\t$\tz\n"
      "t\t7\t+\t\xe2\x80\xa0\n"
      "u\t|_|\tv\t\xc2\xb5\t*\t\n"
      "v\t\\/\t|/\n"
      "w\t\\/\\/\tvv\t\\^/\n"
      "x\t><\t%\t\xc3\x97\n"
      "y\t`/\t\xc2\xa5\tj\n"
      "z\t2\t7_\t%\n";
};

struct ObfuscationStats {
  std::size_t alphabetic = 0;
  std::size_t substituted = 0;
  double fraction() const { return alphabetic ? static_cast<double>(substituted) / alphabetic : 0.0; }
  ObfuscationStats& operator+=(const ObfuscationStats& o) {
    alphabetic += o.alphabetic;
    substituted += o.substituted;
    return *this;
  }
};

inline bool is_ascii_alpha(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

/// Replaces each ASCII letter with probability `rate` by a uniformly chosen
/// substitute. Every other byte is copied. One uniform draw per letter, so
/// outputs at different rates from the same seed are nested.
inline std::string obfuscate(std::string_view text, double rate, const ObfuscationDictionary& dict, Rng& rng,
                             ObfuscationStats* stats = nullptr) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("obfuscation rate must be in [0, 1]");
  std::string out;
  out.reserve(text.size());
  ObfuscationStats local;
  for (unsigned char c : text) {
    if (!is_ascii_alpha(c)) {
      out.push_back(static_cast<char>(c));
      continue;
    }
    ++local.alphabetic;
    const char lower = static_cast<char>(c | 0x20);
    const double u = uniform01(rng);
    const std::uint64_t pick = rng();
    if (u < rate && dict.has(lower)) {
      const auto& subs = dict.substitutes(lower);
      out += subs[pick % subs.size()];
      ++local.substituted;
    } else {
      out.push_back(static_cast<char>(c));
    }
  }
  if (stats) *stats += local;
  return out;
}

struct SweepResult {
  double rate = 0;
  std::vector<LabeledExample> examples;
  ObfuscationStats stats;
};

/// One obfuscated copy of the corpus per rate. Example i always uses the
/// stream derived from (seed, i), whatever the rate.
inline std::vector<SweepResult> sweep_obfuscation(const std::vector<LabeledExample>& corpus,
                                                  const std::vector<double>& rates, const ObfuscationDictionary& dict,
                                                  std::uint64_t seed) {
  if (!std::is_sorted(rates.begin(), rates.end())) throw std::invalid_argument("sweep rates must be sorted");
  std::vector<SweepResult> out;
  for (double r : rates) {
    SweepResult res;
    res.rate = r;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      Rng rng(derive_seed(seed, {0x6f6266ULL, i}));
      LabeledExample ex = corpus[i];
      ex.text = obfuscate(corpus[i].text, r, dict, rng, &res.stats);
      res.examples.push_back(std::move(ex));
    }
    out.push_back(std::move(res));
  }
  return out;
}

/// 0, 0.1, ..., 0.5
inline std::vector<double> default_sweep_rates() { return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}; }

// ---- language identification and code-switching --------------------------

/// Language tag to the fraction of the text identified as that language.
using LangSpanReport = std::map<std::string, double>;

class LanguageIdentifier {
 public:
  virtual ~LanguageIdentifier() = default;
  virtual LangSpanReport identify(std::string_view text) const = 0;
};

/// True iff at least `min_langs` languages each cover >= threshold.
inline bool is_codeswitched(const LangSpanReport& report, double threshold = 0.25, std::size_t min_langs = 2) {
  if (!(threshold > 0.0 && threshold <= 0.5)) throw std::invalid_argument("code-switch threshold must be in (0, 0.5]");
  std::size_t n = 0;
  for (const auto& [_, frac] : report) n += frac >= threshold;
  return n >= min_langs;
}

/// Indices of examples that pass the code-switching rule.
inline std::vector<std::size_t> codeswitch_filter(const std::vector<LabeledExample>& examples,
                                                  const LanguageIdentifier& langid, double threshold = 0.25,
                                                  std::size_t min_langs = 2) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < examples.size(); ++i)
    if (is_codeswitched(langid.identify(examples[i].text), threshold, min_langs)) keep.push_back(i);
  return keep;
}

/// Per-token language model: seen-word lexicon mixed with character
/// trigrams. Tokens without letters stay unidentified.
class NgramLangId : public LanguageIdentifier {
 public:
  void train(const std::string& lang, std::string_view text) {
    auto& prof = profiles_[lang];
    for (const auto& tok : tokens(text)) {
      if (!has_letter(tok)) continue;
      const auto norm = normalize(tok);
      ++prof.words[norm];
      ++prof.word_total;
      for (const auto& g : trigrams(norm)) {
        ++prof.counts[g];
        ++prof.total;
        vocab_[g];
      }
    }
  }

  /// Trains one profile per <lang>.txt file in `dir`.
  void train_directory(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("language seed directory not found: " + dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      train(f.stem().string(), ss.str());
    }
  }

  std::vector<std::string> languages() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : profiles_) out.push_back(k);
    return out;
  }

  /// Per-language log-likelihood of one token; empty if it has no letters.
  std::map<std::string, double> token_scores(std::string_view tok) const {
    require_trained();
    std::map<std::string, double> out;
    if (!has_letter(tok)) return out;
    const auto norm = normalize(tok);
    const auto grams = trigrams(norm);
    const double v = static_cast<double>(vocab_.size()) + 1.0;
    for (const auto& [lang, prof] : profiles_) {
      double chars = 0;
      const double denom = std::log(prof.total + kAlpha * v);
      for (const auto& g : grams) {
        auto it = prof.counts.find(g);
        const double c = it == prof.counts.end() ? 0.0 : it->second;
        chars += std::log(c + kAlpha) - denom;
      }
      // mixture of a seen-word lexicon and the trigram model
      auto w = prof.words.find(norm);
      const double p_word = w == prof.words.end() ? 0.0 : w->second / prof.word_total;
      out[lang] = std::log(kLexiconWeight * p_word + (1.0 - kLexiconWeight) * std::exp(chars));
    }
    return out;
  }

  /// Most likely language of a single token, or empty if it has no letters.
  std::string classify_token(std::string_view tok) const {
    const auto scores = token_scores(tok);
    std::string best;
    double best_score = -1e300;
    for (const auto& [lang, s] : scores)
      if (s > best_score) {
        best_score = s;
        best = lang;
      }
    return best;
  }

  /// Token-level assignment. A token whose best languages are within
  /// kAmbiguityMargin of each other takes the language of the nearest
  /// confident token among those candidates.
  std::vector<std::string> assign(std::string_view text) const {
    require_trained();
    const auto toks = tokens(text);
    std::vector<std::string> label(toks.size());
    std::vector<std::vector<std::string>> candidates(toks.size());
    std::vector<bool> confident(toks.size(), false);
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const auto scores = token_scores(toks[i]);
      if (scores.empty()) continue;
      double best = -1e300;
      for (const auto& [lang, s] : scores)
        if (s > best) {
          best = s;
          label[i] = lang;
        }
      for (const auto& [lang, s] : scores)
        if (s >= best - kAmbiguityMargin) candidates[i].push_back(lang);
      confident[i] = candidates[i].size() == 1;
    }
    auto resolved = label;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (confident[i] || candidates[i].empty()) continue;
      for (std::size_t d = 1; d < toks.size(); ++d) {
        bool done = false;
        for (long j : {static_cast<long>(i) - static_cast<long>(d), static_cast<long>(i + d)}) {
          if (j < 0 || j >= static_cast<long>(toks.size()) || !confident[j]) continue;
          if (std::find(candidates[i].begin(), candidates[i].end(), label[j]) != candidates[i].end()) {
            resolved[i] = label[j];
            done = true;
            break;
          }
        }
        if (done) break;
      }
    }
    return resolved;
  }

  LangSpanReport identify(std::string_view text) const override {
    LangSpanReport report;
    const auto labels = assign(text);
    if (labels.empty()) return report;
    for (const auto& l : labels)
      if (!l.empty()) report[l] += 1.0;
    for (auto& [_, v] : report) v /= static_cast<double>(labels.size());
    return report;
  }

 private:
  static constexpr double kAlpha = 0.5;
  static constexpr double kLexiconWeight = 0.5;
  static constexpr double kAmbiguityMargin = 1.5;
  struct Profile {
    std::unordered_map<std::string, double> counts;
    double total = 0;
    std::unordered_map<std::string, double> words;
    double word_total = 0;
  };
  std::map<std::string, Profile> profiles_;
  std::unordered_map<std::string, char> vocab_;

  void require_trained() const {
    if (profiles_.size() < 2) throw std::logic_error("language identifier needs at least two trained profiles");
  }

  static std::vector<std::string> tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  static bool has_letter(std::string_view tok) {
    for (unsigned char c : tok)
      if (is_ascii_alpha(c) || c >= 0x80) return true;
    return false;
  }

  /// Lowercased letters only (non-ASCII bytes kept), wrapped in boundary marks.
  static std::string normalize(std::string_view tok) {
    std::string s = "^";
    for (unsigned char c : tok) {
      if (is_ascii_alpha(c)) s.push_back(static_cast<char>(c | 0x20));
      else if (c >= 0x80) s.push_back(static_cast<char>(c));
    }
    s.push_back('$');
    return s;
  }

  static std::vector<std::string> trigrams(const std::string& s) {
    std::vector<std::string> out;
    if (s.size() < 3) return out;
    for (std::size_t i = 0; i + 3 <= s.size(); ++i) out.push_back(s.substr(i, 3));
    return out;
  }
};

}  // namespace utc::robustness
