#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace utc {

/// One JSONL record: {"text", "labels": {attr: value}, "lang", "subgroups",
/// "split", "score", "scores": {attr: value}}. Only "text" is required.
struct LabeledExample {
  std::string text;
  std::map<std::string, double> labels;
  std::optional<std::string> lang;
  std::vector<std::string> subgroups;
  std::string split;
  std::optional<double> score;
  std::map<std::string, double> scores;

  bool has_subgroup(const std::string& tag) const {
    for (const auto& s : subgroups)
      if (s == tag) return true;
    return false;
  }
  /// Score for `attribute`, falling back to the single "score" field.
  std::optional<double> score_for(const std::string& attribute) const {
    auto it = scores.find(attribute);
    if (it != scores.end()) return it->second;
    return score;
  }
};

inline LabeledExample example_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
    throw std::invalid_argument("example needs a string \"text\" field");
  }
  LabeledExample ex;
  ex.text = j["text"].get<std::string>();
  if (j.contains("labels")) {
    for (const auto& [k, v] : j["labels"].items()) {
      if (!v.is_number()) throw std::invalid_argument("label " + k + " is not numeric");
      ex.labels[k] = v.get<double>();
    }
  }
  if (j.contains("lang") && j["lang"].is_string()) ex.lang = j["lang"].get<std::string>();
  if (j.contains("subgroups")) ex.subgroups = j["subgroups"].get<std::vector<std::string>>();
  if (j.contains("split") && j["split"].is_string()) ex.split = j["split"].get<std::string>();
  if (j.contains("score") && j["score"].is_number()) ex.score = j["score"].get<double>();
  if (j.contains("scores"))
    for (const auto& [k, v] : j["scores"].items()) ex.scores[k] = v.get<double>();
  return ex;
}

inline nlohmann::json example_to_json(const LabeledExample& ex) {
  nlohmann::json j;
  j["text"] = ex.text;
  j["labels"] = ex.labels;
  if (ex.lang) j["lang"] = *ex.lang;
  j["subgroups"] = ex.subgroups;
  if (!ex.split.empty()) j["split"] = ex.split;
  if (ex.score) j["score"] = *ex.score;
  if (!ex.scores.empty()) j["scores"] = ex.scores;
  return j;
}

inline std::vector<LabeledExample> parse_jsonl(std::istream& in) {
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<LabeledExample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_jsonl(in);
}

inline void write_jsonl(std::ostream& out, const std::vector<LabeledExample>& examples) {
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

inline void write_jsonl(const std::string& path, const std::vector<LabeledExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_jsonl(out, examples);
}

}  // namespace utc
