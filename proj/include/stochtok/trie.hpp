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

#include <algorithm>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace stochtok {

// Byte-level prefix trie. match_prefixes enumerates every stored key that
// is a prefix of text[start..], so per-position work is bounded by the
// longest key.
class ByteTrie {
 public:
  void insert(std::string_view key, int32_t value) {
    int32_t node = 0;
    for (const char c : key)
      node = ensure_child(node, static_cast<uint8_t>(c));
    nodes_[node].values.push_back(value);
  }

  // emit(match_len, value) for every key matching at text[start..], in
  // key-length order then insertion order.
  template <typename Emit>
  void match_prefixes(std::string_view text, size_t start, Emit&& emit) const {
    int32_t node = 0;
    for (size_t pos = start; pos < text.size(); ++pos) {
      node = child(node, static_cast<uint8_t>(text[pos]));
      if (node < 0) return;
      for (const int32_t v : nodes_[node].values)
        emit(pos + 1 - start, v);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::pair<uint8_t, int32_t>> children;  // sorted by byte
    std::vector<int32_t> values;
  };

  int32_t child(int32_t node, uint8_t b) const {
    const auto& kids = nodes_[node].children;
    const auto it = std::lower_bound(
        kids.begin(), kids.end(), b,
        [](const auto& kv, uint8_t key) { return kv.first < key; });
    if (it == kids.end() || it->first != b) return -1;
    return it->second;
  }

  int32_t ensure_child(int32_t node, uint8_t b) {
    const int32_t found = child(node, b);
    if (found >= 0) return found;
    const auto idx = static_cast<int32_t>(nodes_.size());
    nodes_.emplace_back();
    auto& kids = nodes_[node].children;
    kids.insert(std::lower_bound(kids.begin(), kids.end(), b,
                                 [](const auto& kv, uint8_t key) {
                                   return kv.first < key;
                                 }),
                {b, idx});
    return idx;
  }

  std::vector<Node> nodes_{1};
};

}  // namespace stochtok
