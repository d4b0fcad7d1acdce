#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "utc/model.hpp"

// Checkpoint = <prefix>.json manifest + <prefix>.bin little-endian payload.
namespace utc::checkpoint {

inline nlohmann::json architecture_to_json(const Architecture& a) {
  nlohmann::json j;
  j["d_model"] = a.model.d_model;
  j["d_ff"] = a.model.d_ff;
  j["d_kv"] = a.model.d_kv;
  j["n_heads"] = a.model.n_heads;
  j["n_enc_layers"] = a.model.n_enc_layers;
  j["n_dec_layers"] = a.model.n_dec_layers;
  j["dropout_rate"] = a.model.dropout_rate;
  j["rel_bias_buckets"] = a.model.rel_bias_buckets;
  j["rel_bias_max_distance"] = a.model.rel_bias_max_distance;
  j["vocab_size"] = a.model.vocab_size;
  j["use_gbst"] = a.use_gbst;
  j["gbst_max_block"] = a.gbst.max_block;
  j["gbst_conv_width"] = a.gbst.conv_width;
  j["downsample"] = a.gbst.downsample;
  j["attributes"] = a.attributes;
  j["max_len"] = a.max_len;
  j["num_sentinels"] = a.num_sentinels;
  return j;
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  a.model.d_model = j.at("d_model");
  a.model.d_ff = j.at("d_ff");
  a.model.d_kv = j.at("d_kv");
  a.model.n_heads = j.at("n_heads");
  a.model.n_enc_layers = j.at("n_enc_layers");
  a.model.n_dec_layers = j.at("n_dec_layers");
  a.model.dropout_rate = j.at("dropout_rate");
  a.model.rel_bias_buckets = j.at("rel_bias_buckets");
  a.model.rel_bias_max_distance = j.at("rel_bias_max_distance");
  a.model.vocab_size = j.at("vocab_size");
  a.use_gbst = j.at("use_gbst");
  a.gbst.max_block = j.at("gbst_max_block");
  a.gbst.conv_width = j.at("gbst_conv_width");
  a.gbst.downsample = j.at("downsample");
  a.gbst.d_model = a.model.d_model;
  a.attributes = j.at("attributes").get<std::vector<std::string>>();
  a.max_len = j.at("max_len");
  a.num_sentinels = j.at("num_sentinels");
  return a;
}

struct Metadata {
  std::size_t step = 0;
  std::map<std::string, std::string> config;  // flat run configuration
  std::map<std::string, double> metrics;
};

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <class U>
void write_le(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U read_le(const unsigned char* p) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U v;
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

}  // namespace detail

inline std::string manifest_path(const std::string& prefix) { return prefix + ".json"; }
inline std::string payload_path(const std::string& prefix) { return prefix + ".bin"; }

/// Writes both files; the manifest is written last, via a temporary, so a
/// crash never leaves a manifest pointing at a partial payload.
template <class T>
void save(const std::string& prefix, const UtcModel<T>& model, const Metadata& meta = {}) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  const auto parent = std::filesystem::path(prefix).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  nlohmann::json index = nlohmann::json::array();
  {
    std::ofstream bin(payload_path(prefix), std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write " + payload_path(prefix));
    std::uint64_t offset = 0;
    for (const auto& [name, p] : model.params()) {
      index.push_back({{"name", name}, {"shape", p.value.shape}, {"offset", offset}, {"count", p.value.size()}});
      for (T v : p.value.data) detail::write_le(bin, v);
      offset += p.value.size() * sizeof(T);
    }
    if (!bin) throw std::runtime_error("failed writing " + payload_path(prefix));
  }
  nlohmann::json m;
  m["format"] = "utc-checkpoint";
  m["version"] = 1;
  m["dtype"] = detail::dtype_name<T>();
  m["byte_order"] = "little";
  m["payload"] = std::filesystem::path(payload_path(prefix)).filename().string();
  m["step"] = meta.step;
  m["config"] = meta.config;
  m["metrics"] = meta.metrics;
  m["architecture"] = architecture_to_json(model.arch());
  m["parameters"] = index;
  const std::string tmp = manifest_path(prefix) + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << m.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, manifest_path(prefix));
}

inline nlohmann::json read_manifest(const std::string& prefix) {
  std::ifstream in(manifest_path(prefix));
  if (!in) throw std::runtime_error("cannot open checkpoint manifest " + manifest_path(prefix));
  auto m = nlohmann::json::parse(in);
  if (m.value("format", "") != "utc-checkpoint") throw std::runtime_error("not a checkpoint manifest: " + prefix);
  return m;
}

/// Loads into precision T; converts when the payload was written in the other one.
template <class T>
UtcModel<T> load(const std::string& prefix, Metadata* meta = nullptr) {
  const auto m = read_manifest(prefix);
  const std::string dtype = m.at("dtype");
  const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
  if (!width) throw std::runtime_error("unsupported checkpoint dtype " + dtype);
  const auto bin_path = (std::filesystem::path(prefix).parent_path() / m.at("payload").get<std::string>()).string();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open checkpoint payload " + bin_path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  ParamStore<T> store;
  for (const auto& e : m.at("parameters")) {
    const std::string name = e.at("name");
    const Shape shape = e.at("shape").get<Shape>();
    const std::uint64_t offset = e.at("offset"), count = e.at("count");
    if (offset + count * width > bytes.size()) throw std::runtime_error("checkpoint payload truncated at " + name);
    if (shape.size() != 2 || shape_numel(shape) != count) {
      throw std::runtime_error("checkpoint shape/count mismatch for " + name);
    }
    Tensor<T> t(shape);
    for (std::uint64_t i = 0; i < count; ++i) {
      const unsigned char* p = bytes.data() + offset + i * width;
      t.data[i] = width == 4 ? static_cast<T>(detail::read_le<float>(p)) : static_cast<T>(detail::read_le<double>(p));
    }
    store.add(name, std::move(t));
  }
  if (meta) {
    meta->step = m.value("step", std::size_t{0});
    meta->config = m.value("config", std::map<std::string, std::string>{});
    meta->metrics = m.value("metrics", std::map<std::string, double>{});
  }
  return UtcModel<T>(architecture_from_json(m.at("architecture")), std::move(store));
}

}  // namespace utc::checkpoint
