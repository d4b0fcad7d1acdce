#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "utc/ops.hpp"

namespace utc {

// Byte vocabulary: 0-255 raw bytes followed by three specials. Sentinel ids
// used by span corruption start right after the specials.
inline constexpr int kPadId = 256;
inline constexpr int kEosId = 257;
inline constexpr int kPrefixId = 258;
inline constexpr int kByteVocabSize = 259;
inline constexpr int kFirstSentinelId = 259;

inline bool is_raw_byte(int id) { return id >= 0 && id < 256; }

struct ByteSequence {
  std::vector<int> ids;
  Mask mask;                        // 0 exactly at padding
  std::size_t original_length = 0;  // text bytes before truncation

  std::size_t size() const { return ids.size(); }
  std::size_t unpadded_length() const {
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    return n;
  }
};

/// Builds a sequence from ids (no padding) and right-pads it to `len`.
inline ByteSequence make_sequence(std::vector<int> ids, std::size_t len) {
  if (ids.size() > len) throw std::invalid_argument("make_sequence: ids exceed padded length");
  if (len == 0) throw std::invalid_argument("make_sequence: empty sequence");
  ByteSequence seq;
  seq.original_length = ids.size();
  seq.mask.assign(len, 0);
  std::fill_n(seq.mask.begin(), ids.size(), 1);
  ids.resize(len, kPadId);
  seq.ids = std::move(ids);
  return seq;
}

/// [prefix] ++ bytes truncated to fit ++ EOS, right-padded to max_len.
/// Truncation is by byte, so a multibyte character may be cut.
inline ByteSequence encode_text(std::string_view text, std::size_t max_len, bool prepend_prefix) {
  if (max_len < 2) throw std::invalid_argument("encode_text: max_len must be at least 2");
  const std::size_t overhead = prepend_prefix ? 2 : 1;
  const std::size_t room = max_len >= overhead ? max_len - overhead : 0;
  const std::size_t keep = std::min(room, text.size());
  std::vector<int> ids;
  ids.reserve(max_len);
  if (prepend_prefix) ids.push_back(kPrefixId);
  for (std::size_t i = 0; i < keep; ++i) ids.push_back(static_cast<unsigned char>(text[i]));
  ids.push_back(kEosId);
  ByteSequence seq = make_sequence(std::move(ids), max_len);
  seq.original_length = text.size();
  return seq;
}

/// Raw bytes of the unpadded, non-special ids.
inline std::string decode_bytes(const ByteSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i)
    if (seq.mask[i] && is_raw_byte(seq.ids[i])) out.push_back(static_cast<char>(seq.ids[i]));
  return out;
}

template <class T>
struct EmbeddedByteSequence {
  ad::Var<T> x;  // L x d_model, zero rows at padding
  Mask mask;
};

/// Embedding lookup; padding rows are zero vectors.
template <class T>
EmbeddedByteSequence<T> embed(const ByteSequence& seq, ad::Var<T> table) {
  const auto rows = static_cast<int>(table.rows());
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.ids[i] < 0 || seq.ids[i] >= rows) {
      throw std::out_of_range("embed: id " + std::to_string(seq.ids[i]) + " at position " +
                              std::to_string(i) + " outside embedding table of " +
                              std::to_string(rows) + " rows");
    }
  }
  return {ad::gather_rows(table, seq.ids, seq.mask), seq.mask};
}

}  // namespace utc
