// Copyright 2026 The stochtok Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stochtok/common.hpp"
#include "stochtok/trie.hpp"

namespace stochtok {

// One segmentation of a string: token ids plus the sum of their unigram
// log-probabilities (natural log).
struct Tokenization {
  std::vector<int32_t> ids;
  double log_prob = 0.0;

  friend bool operator==(const Tokenization& a, const Tokenization& b) {
    return a.ids == b.ids;
  }
};

struct MergeRule {
  std::string left;
  std::string right;
};

struct LoadOptions {
  // Overrides the boundary marker detected from file metadata.
  std::optional<std::string> boundary_marker;
};

// An immutable pretrained vocabulary: id -> token bytes, special flags,
// optional ordered merge rules, optional 256-entry byte fallback, and the
// byte sequence this vocabulary uses to mark word-initial pieces.
//
// Byte-fallback pieces use the `<0xHH>` convention; their stored content is
// the single raw byte. Safe for unlimited concurrent readers after
// construction.
class Vocabulary {
 public:
  Vocabulary(std::unordered_map<int32_t, std::string> entries,
             std::unordered_set<int32_t> specials,
             std::vector<MergeRule> merges, std::string boundary_marker,
             std::unordered_map<int32_t, std::string> raw_pieces = {})
      : entries_(std::move(entries)),
        specials_(std::move(specials)),
        merges_(std::move(merges)),
        boundary_marker_(std::move(boundary_marker)),
        raw_pieces_(std::move(raw_pieces)) {
    validate_and_index();
  }

  size_t size() const { return entries_.size(); }
  bool contains(int32_t id) const { return entries_.count(id) != 0; }

  const std::string& piece(int32_t id) const {
    const auto it = entries_.find(id);
    if (it == entries_.end())
      throw DataError("unknown token id " + std::to_string(id));
    return it->second;
  }

  // The piece as written in the source file (`<0xHH>` for fallback bytes).
  std::string display_piece(int32_t id) const {
    const auto it = raw_pieces_.find(id);
    if (it != raw_pieces_.end()) return it->second;
    return piece(id);
  }

  bool is_special(int32_t id) const { return specials_.count(id) != 0; }
  const std::unordered_set<int32_t>& specials() const { return specials_; }
  const std::vector<MergeRule>& merges() const { return merges_; }
  const std::string& boundary_marker() const { return boundary_marker_; }

  bool has_byte_fallback() const { return !byte_fallback_.empty(); }
  bool is_byte_fallback(int32_t id) const {
    return byte_fallback_ids_.count(id) != 0;
  }
  int32_t byte_fallback_id(uint8_t b) const { return byte_fallback_[b]; }

  // Id of a non-special, non-fallback entry with exactly these bytes.
  std::optional<int32_t> encode_piece_id(std::string_view bytes) const {
    const auto it = piece_to_id_.find(std::string(bytes));
    if (it == piece_to_id_.end()) return std::nullopt;
    return it->second;
  }

  // Match trie over non-special, non-fallback entries; fallback edges are
  // layered on top by the lattice builder.
  const ByteTrie& match_trie() const { return trie_; }

  // Ids in ascending order; handy for deterministic iteration.
  const std::vector<int32_t>& sorted_ids() const { return sorted_ids_; }

  int32_t merge_rank(const std::string& left, const std::string& right) const {
    const auto it = merge_ranks_.find(left + '\x1f' + right);
    if (it == merge_ranks_.end()) return -1;
    return it->second;
  }

 private:
  void validate_and_index() {
    if (!boundary_marker_.empty() && boundary_marker_.find(' ') != std::string::npos)
      throw DataError("boundary marker must not contain raw spaces");
    std::array<int32_t, 256> fallback;
    fallback.fill(-1);
    size_t fallback_count = 0;
    for (const auto& [id, bytes] : entries_) {
      if (bytes.empty())
        throw DataError("empty token string for id " + std::to_string(id));
      const auto raw = raw_pieces_.find(id);
      if (raw != raw_pieces_.end()) {
        // Fallback piece: raw form <0xHH>, content one byte.
        const auto b = static_cast<uint8_t>(bytes[0]);
        if (fallback[b] != -1)
          throw DataError("duplicate byte-fallback token for byte " +
                          std::to_string(b));
        fallback[b] = id;
        ++fallback_count;
        byte_fallback_ids_.insert(id);
      }
      sorted_ids_.push_back(id);
    }
    std::sort(sorted_ids_.begin(), sorted_ids_.end());
    if (fallback_count != 0) {
      if (fallback_count != 256)
        throw DataError("byte fallback must cover all 256 byte values, got " +
                        std::to_string(fallback_count));
      byte_fallback_.assign(fallback.begin(), fallback.end());
    }
    for (const int32_t id : specials_) {
      if (!contains(id))
        throw DataError("special token id " + std::to_string(id) +
                        " not in vocabulary");
      if (byte_fallback_ids_.count(id))
        throw DataError("token id " + std::to_string(id) +
                        " is both special and byte fallback");
    }
    // Regular pieces only; smallest id wins if two files alias a piece.
    for (const int32_t id : sorted_ids_) {
      if (is_special(id) || is_byte_fallback(id)) continue;
      piece_to_id_.emplace(entries_.at(id), id);
      trie_.insert(entries_.at(id), id);
    }
    if (!merges_.empty()) {
      std::unordered_set<std::string_view> known_pieces;
      known_pieces.reserve(entries_.size());
      for (const auto& [id, bytes] : entries_) known_pieces.insert(bytes);
      for (size_t rank = 0; rank < merges_.size(); ++rank) {
        const auto& m = merges_[rank];
        if (!known_pieces.count(m.left + m.right))
          throw DataError("merge rule output '" + m.left + m.right +
                          "' not in vocabulary");
        merge_ranks_.emplace(m.left + '\x1f' + m.right,
                             static_cast<int32_t>(rank));
      }
    }
  }

  std::unordered_map<int32_t, std::string> entries_;
  std::unordered_set<int32_t> specials_;
  std::vector<MergeRule> merges_;
  std::string boundary_marker_;
  std::unordered_map<int32_t, std::string> raw_pieces_;

  std::vector<int32_t> byte_fallback_;  // 256 ids, or empty
  std::unordered_set<int32_t> byte_fallback_ids_;
  std::unordered_map<std::string, int32_t> piece_to_id_;
  std::unordered_map<std::string, int32_t> merge_ranks_;
  std::vector<int32_t> sorted_ids_;
  ByteTrie trie_;
};

namespace detail {

inline std::optional<uint8_t> parse_byte_piece(std::string_view piece) {
  // <0xHH>
  if (piece.size() != 6 || piece.substr(0, 3) != "<0x" || piece[5] != '>')
    return std::nullopt;
  uint8_t value = 0;
  for (const char c : piece.substr(3, 2)) {
    value <<= 4;
    if (c >= '0' && c <= '9')
      value |= c - '0';
    else if (c >= 'A' && c <= 'F')
      value |= c - 'A' + 10;
    else if (c >= 'a' && c <= 'f')
      value |= c - 'a' + 10;
    else
      return std::nullopt;
  }
  return value;
}

inline constexpr std::string_view kSentencepieceMarker = "\xe2\x96\x81";  // U+2581

inline MergeRule parse_merge(const nlohmann::json& entry) {
  if (entry.is_array()) {
    if (entry.size() != 2 || !entry[0].is_string() || !entry[1].is_string())
      throw DataError("merge rule must be a [left, right] pair");
    return {entry[0].get<std::string>(), entry[1].get<std::string>()};
  }
  if (!entry.is_string()) throw DataError("merge rule must be a string or pair");
  const std::string s = entry.get<std::string>();
  const size_t space = s.find(' ');
  if (space == std::string::npos || s.find(' ', space + 1) != std::string::npos)
    throw DataError("merge rule '" + s + "' is not 'left right'");
  return {s.substr(0, space), s.substr(space + 1)};
}

}  // namespace detail

// Parses either the native layout
//   {"vocab": {piece: id}, "merges": [...], "special_tokens": [ids],
//    "boundary_marker": "..."}
// or the common pretrained-tokenizer layout
//   {"model": {"vocab": ..., "merges": ...}, "added_tokens": [...]}.
inline Vocabulary parse_vocab_json(const nlohmann::json& j,
                                   const LoadOptions& options = {}) {
  if (!j.is_object()) throw DataError("vocabulary file: top level must be an object");

  const bool pretrained_layout = j.contains("model");
  const nlohmann::json* vocab_obj = nullptr;
  const nlohmann::json* merges_arr = nullptr;

  if (pretrained_layout) {
    const auto& model = j.at("model");
    if (!model.is_object() || !model.contains("vocab"))
      throw DataError("vocabulary file: 'model' has no 'vocab'");
    vocab_obj = &model.at("vocab");
    if (model.contains("merges")) merges_arr = &model.at("merges");
  } else {
    if (!j.contains("vocab"))
      throw DataError("vocabulary file: missing 'vocab'");
    vocab_obj = &j.at("vocab");
    if (j.contains("merges")) merges_arr = &j.at("merges");
  }
  if (!vocab_obj->is_object())
    throw DataError("vocabulary file: 'vocab' must be an object");

  std::unordered_map<int32_t, std::string> entries;
  std::unordered_map<int32_t, std::string> raw_pieces;
  std::unordered_set<int32_t> specials;
  bool saw_marker_prefix = false;

  const auto add_entry = [&](const std::string& piece, int32_t id) {
    std::string bytes = piece;
    if (const auto b = detail::parse_byte_piece(piece)) {
      bytes.assign(1, static_cast<char>(*b));
      raw_pieces.emplace(id, piece);
    } else if (piece.compare(0, detail::kSentencepieceMarker.size(),
                             detail::kSentencepieceMarker) == 0) {
      saw_marker_prefix = true;
    }
    if (!entries.emplace(id, std::move(bytes)).second)
      throw DataError("duplicate token id " + std::to_string(id));
  };

  for (const auto& [piece, id_json] : vocab_obj->items()) {
    if (!id_json.is_number_integer())
      throw DataError("vocabulary id for '" + piece + "' must be an integer");
    add_entry(piece, id_json.get<int32_t>());
  }

  if (pretrained_layout) {
    if (j.contains("added_tokens")) {
      for (const auto& tok : j.at("added_tokens")) {
        const auto id = tok.at("id").get<int32_t>();
        const auto content = tok.at("content").get<std::string>();
        if (!entries.count(id)) add_entry(content, id);
        if (tok.value("special", false)) specials.insert(id);
      }
    }
  } else if (j.contains("special_tokens")) {
    for (const auto& id : j.at("special_tokens"))
      specials.insert(id.get<int32_t>());
  }

  std::vector<MergeRule> merges;
  if (merges_arr != nullptr) {
    if (!merges_arr->is_array())
      throw DataError("vocabulary file: 'merges' must be an array");
    merges.reserve(merges_arr->size());
    for (const auto& entry : *merges_arr) merges.push_back(detail::parse_merge(entry));
  }

  std::string marker;
  if (options.boundary_marker) {
    marker = *options.boundary_marker;
  } else if (!pretrained_layout && j.contains("boundary_marker")) {
    marker = j.at("boundary_marker").get<std::string>();
  } else if (pretrained_layout && saw_marker_prefix) {
    marker = std::string(detail::kSentencepieceMarker);
  }

  return Vocabulary(std::move(entries), std::move(specials), std::move(merges),
                    std::move(marker), std::move(raw_pieces));
}

inline Vocabulary load_vocab(const std::string& path,
                             const LoadOptions& options = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed vocabulary file " + path + ": " + e.what());
  }
  return parse_vocab_json(j, options);
}

// Rewrites whitespace with the vocabulary's boundary marker: one marker is
// prepended and every raw space becomes a marker, so word-initial pieces
// carry the marker exactly as the source tokenizer produced them. Identity
// for marker-less vocabularies and for empty input.
inline std::string normalize_text(const Vocabulary& v, std::string_view text) {
  const std::string& marker = v.boundary_marker();
  if (marker.empty() || text.empty()) return std::string(text);
  std::string out;
  out.reserve(text.size() + marker.size() * 2);
  out += marker;
  for (const char c : text) {
    if (c == ' ')
      out += marker;
    else
      out += c;
  }
  return out;
}

// Inverse of normalize_text over marked bytes: markers back to spaces, and
// the prepended marker's space is dropped again.
inline std::string denormalize_bytes(const Vocabulary& v, std::string_view marked) {
  const std::string& marker = v.boundary_marker();
  if (marker.empty()) return std::string(marked);
  const bool leading_marker =
      marked.size() >= marker.size() &&
      marked.substr(0, marker.size()) == marker;
  std::string out;
  out.reserve(marked.size());
  size_t i = 0;
  while (i < marked.size()) {
    if (marked.compare(i, marker.size(), marker) == 0) {
      out += ' ';
      i += marker.size();
    } else {
      out += marked[i++];
    }
  }
  if (leading_marker && !out.empty() && out[0] == ' ') out.erase(0, 1);
  return out;
}

// Concatenated token bytes mapped back through the boundary-marker
// convention. No text validation; pairs with byte-level round trips.
inline std::string decode_bytes(const Vocabulary& v, std::span<const int32_t> ids) {
  std::string marked;
  for (const int32_t id : ids) marked += v.piece(id);
  return denormalize_bytes(v, marked);
}

inline std::string decode_bytes(const Vocabulary& v, const Tokenization& t) {
  return decode_bytes(v, std::span<const int32_t>(t.ids));
}

// decode_bytes plus a well-formedness check on the result.
inline std::string decode(const Vocabulary& v, std::span<const int32_t> ids) {
  std::string text = decode_bytes(v, ids);
  if (!is_valid_utf8(text))
    throw DataError("decoded bytes are not valid UTF-8 text");
  return text;
}

inline std::string decode(const Vocabulary& v, const Tokenization& t) {
  return decode(v, std::span<const int32_t>(t.ids));
}

namespace detail {

// Symbol chain for the merge loop; dead symbols have len == 0.
struct BpeSymbol {
  size_t begin = 0;
  size_t len = 0;
  int32_t prev = -1;
  int32_t next = -1;
};

struct BpeBigram {
  int32_t rank;
  int32_t left;     // index of the left symbol
  size_t left_len;  // snapshot; stale entries are skipped
  size_t right_len;

  bool operator<(const BpeBigram& other) const {
    // Lowest rank first; ties by leftmost occurrence.
    if (rank != other.rank) return rank > other.rank;
    return left > other.left;
  }
};

}  // namespace detail

// Canonical greedy BPE over the marker-rewritten text: repeatedly applies
// the lowest-ranked applicable merge, then resolves surviving symbols to
// ids, falling back to byte tokens where the vocabulary has them.
// Deterministic; decode(v, result) reproduces the input exactly.
inline std::vector<int32_t> bpe_encode(const Vocabulary& v, std::string_view text) {
  if (v.merges().empty())
    throw DataError("vocabulary has no merge rules; cannot BPE-encode");
  const std::string marked = normalize_text(v, text);
  if (marked.empty()) return {};

  std::vector<detail::BpeSymbol> syms;
  syms.reserve(marked.size());
  for (size_t pos = 0; pos < marked.size();) {
    const size_t len = utf8_char_len(marked, pos);
    detail::BpeSymbol s;
    s.begin = pos;
    s.len = len;
    s.prev = static_cast<int32_t>(syms.size()) - 1;
    s.next = pos + len < marked.size() ? static_cast<int32_t>(syms.size()) + 1 : -1;
    syms.push_back(s);
    pos += len;
  }

  std::priority_queue<detail::BpeBigram> agenda;
  const auto push_bigram = [&](int32_t left) {
    const int32_t right = syms[left].next;
    if (right < 0) return;
    const std::string l(marked, syms[left].begin, syms[left].len);
    const std::string r(marked, syms[right].begin, syms[right].len);
    const int32_t rank = v.merge_rank(l, r);
    if (rank >= 0) agenda.push({rank, left, syms[left].len, syms[right].len});
  };
  for (int32_t i = 0; i + 1 < static_cast<int32_t>(syms.size()); ++i)
    push_bigram(i);

  while (!agenda.empty()) {
    const auto top = agenda.top();
    agenda.pop();
    auto& left = syms[top.left];
    if (left.len != top.left_len || left.next < 0) continue;
    auto& right = syms[left.next];
    if (right.len != top.right_len) continue;
    left.len += right.len;
    right.len = 0;
    left.next = right.next;
    if (right.next >= 0) syms[right.next].prev = top.left;
    if (left.prev >= 0) push_bigram(left.prev);
    push_bigram(top.left);
  }

  std::vector<int32_t> ids;
  for (int32_t i = 0; i >= 0; i = syms[i].next) {
    const std::string_view bytes(marked.data() + syms[i].begin, syms[i].len);
    if (const auto id = v.encode_piece_id(bytes)) {
      ids.push_back(*id);
      continue;
    }
    if (!v.has_byte_fallback())
      throw DataError("text not representable: '" + std::string(bytes) +
                      "' has no token and the vocabulary lacks byte fallback");
    for (const char b : bytes)
      ids.push_back(v.byte_fallback_id(static_cast<uint8_t>(b)));
  }
  return ids;
}

}  // namespace stochtok
