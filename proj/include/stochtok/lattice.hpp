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
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stochtok/common.hpp"
#include "stochtok/unigram.hpp"
#include "stochtok/vocab.hpp"

namespace stochtok {

struct LatticeEdge {
  int32_t token_id;
  uint32_t begin;  // byte offsets into text_bytes
  uint32_t end;
  double log_prob;
};

// Segmentation lattice over byte positions 0..n of an input string: a DAG
// whose paths from 0 to n are exactly the valid segmentations. Edges are
// kept sorted by token id per position, which fixes the deterministic
// (lexicographic) orders downstream.
class Lattice {
 public:
  explicit Lattice(std::string text_bytes)
      : bytes_(std::move(text_bytes)),
        from_(bytes_.size() + 1),
        into_(bytes_.size() + 1) {}

  const std::string& text_bytes() const { return bytes_; }
  size_t size() const { return bytes_.size(); }

  const std::vector<LatticeEdge>& edges_from(size_t pos) const {
    return from_[pos];
  }
  const std::vector<LatticeEdge>& edges_into(size_t pos) const {
    return into_[pos];
  }
  size_t edge_count() const { return edge_count_; }

  void add_edge(uint32_t begin, uint32_t end, int32_t token_id,
                double log_prob) {
    if (end <= begin || end > size())
      throw DataError("lattice edge out of range");
    const LatticeEdge edge{token_id, begin, end, log_prob};
    insert_sorted(from_[begin], edge);
    insert_sorted(into_[end], edge);
    ++edge_count_;
    fwd_.clear();
  }

  // forward_log_mass[q] = log of the summed probability of all
  // segmentations of text_bytes[0..q). Computed lazily, cached.
  const std::vector<double>& forward_log_mass() const {
    if (fwd_.empty()) {
      fwd_.assign(size() + 1, kNegInf);
      fwd_[0] = 0.0;
      for (size_t pos = 0; pos < size(); ++pos) {
        if (fwd_[pos] == kNegInf) continue;
        for (const auto& e : from_[pos])
          fwd_[e.end] = log_add_exp(fwd_[e.end], fwd_[pos] + e.log_prob);
      }
    }
    return fwd_;
  }

  double total_log_mass() const { return forward_log_mass()[size()]; }

  // True when at least one full segmentation exists (the empty string has
  // exactly one, the empty segmentation).
  bool has_segmentation() const { return total_log_mass() != kNegInf; }

 private:
  static void insert_sorted(std::vector<LatticeEdge>& edges,
                            const LatticeEdge& edge) {
    const auto key = [](const LatticeEdge& e) {
      return std::make_tuple(e.token_id, e.begin, e.end);
    };
    const auto it = std::lower_bound(
        edges.begin(), edges.end(), edge,
        [&](const LatticeEdge& a, const LatticeEdge& b) { return key(a) < key(b); });
    if (it != edges.end() && key(*it) == key(edge))
      throw DataError("duplicate lattice edge");
    edges.insert(it, edge);
  }

  std::string bytes_;
  std::vector<std::vector<LatticeEdge>> from_;
  std::vector<std::vector<LatticeEdge>> into_;
  size_t edge_count_ = 0;
  mutable std::vector<double> fwd_;
};

// Builds the lattice over already-marker-rewritten bytes: every non-special
// vocabulary match found through the prefix trie, plus single-byte fallback
// edges wherever the vocabulary has byte fallback (even where longer
// matches exist, so the sampler can reach every valid segmentation).
// Positions where no segmentation passes simply stay unreachable; callers
// observe that as a zero-mass lattice.
inline Lattice build_lattice_marked(const UnigramModel& m, const Vocabulary& v,
                                    std::string_view marked_bytes) {
  Lattice lat{std::string(marked_bytes)};
  const auto& text = lat.text_bytes();
  for (uint32_t pos = 0; pos < text.size(); ++pos) {
    v.match_trie().match_prefixes(text, pos, [&](size_t len, int32_t id) {
      lat.add_edge(pos, pos + static_cast<uint32_t>(len), id, m.log_prob(id));
    });
    if (v.has_byte_fallback()) {
      const int32_t fb = v.byte_fallback_id(static_cast<uint8_t>(text[pos]));
      lat.add_edge(pos, pos + 1, fb, m.log_prob(fb));
    }
  }
  return lat;
}

// Front door: boundary-marker rewriting then lattice construction.
inline Lattice build_lattice(const UnigramModel& m, const Vocabulary& v,
                             std::string_view text) {
  return build_lattice_marked(m, v, normalize_text(v, text));
}

// Pr(x_tok | X) numerator: sum of per-token log probabilities.
inline double score(const UnigramModel& m, std::span<const int32_t> ids) {
  double total = 0.0;
  for (const int32_t id : ids) total += m.log_prob(id);
  return total;
}

inline double score(const UnigramModel& m, const Tokenization& t) {
  return score(m, std::span<const int32_t>(t.ids));
}

// backward_log_mass[q] = log summed probability of all segmentations of
// text_bytes[q..n).
inline std::vector<double> backward_log_mass(const Lattice& lat) {
  const size_t n = lat.size();
  std::vector<double> beta(n + 1, kNegInf);
  beta[n] = 0.0;
  for (size_t pos = n; pos-- > 0;) {
    for (const auto& e : lat.edges_from(pos)) {
      if (beta[e.end] == kNegInf) continue;
      beta[pos] = log_add_exp(beta[pos], e.log_prob + beta[e.end]);
    }
  }
  return beta;
}

// Brute-force enumeration of every distinct segmentation, in lexicographic
// token-id order, each scored by the unigram product. The independent
// oracle for the forward mass, k-best search, and FFBS conditionals.
inline std::vector<Tokenization> enumerate_all(const Lattice& lat,
                                               size_t cap = 100000) {
  const size_t n = lat.size();
  // Reachability to the end keeps dead-end prefixes out of the walk.
  std::vector<char> alive(n + 1, 0);
  alive[n] = 1;
  for (size_t pos = n; pos-- > 0;)
    for (const auto& e : lat.edges_from(pos))
      if (alive[e.end]) alive[pos] = 1;

  std::vector<Tokenization> out;
  if (!alive[0]) return out;

  std::vector<int32_t> ids;
  std::vector<double> lps;
  const auto walk = [&](auto&& self, size_t pos) -> void {
    if (pos == n) {
      double lp = 0.0;
      for (const double x : lps) lp += x;
      if (out.size() >= cap)
        throw DataError("segmentation count exceeds enumeration cap of " +
                        std::to_string(cap));
      out.push_back({ids, lp});
      return;
    }
    for (const auto& e : lat.edges_from(pos)) {
      if (!alive[e.end]) continue;
      ids.push_back(e.token_id);
      lps.push_back(e.log_prob);
      self(self, e.end);
      ids.pop_back();
      lps.pop_back();
    }
  };
  walk(walk, 0);
  return out;
}

// One E-step for a single document: expected token counts under the
// posterior over segmentations, plus the document log-mass. Both sides of
// the forward-backward product stay in log space until the final exp.
inline std::pair<std::unordered_map<int32_t, double>, double>
expected_token_counts(const Lattice& lat) {
  if (!lat.has_segmentation())
    throw DataError("document has no representable segmentation");
  const auto& alpha = lat.forward_log_mass();
  const auto beta = backward_log_mass(lat);
  const double z = alpha[lat.size()];
  std::unordered_map<int32_t, double> expected;
  for (size_t pos = 0; pos < lat.size(); ++pos) {
    if (alpha[pos] == kNegInf) continue;
    for (const auto& e : lat.edges_from(pos)) {
      if (beta[e.end] == kNegInf) continue;
      expected[e.token_id] +=
          std::exp(alpha[pos] + e.log_prob + beta[e.end] - z);
    }
  }
  return {std::move(expected), z};
}

// Debug dump, one edge per line: `start end token_id log_prob`. No
// stability guarantee.
inline void dump_lattice(const Lattice& lat, std::ostream& out) {
  for (size_t pos = 0; pos <= lat.size(); ++pos)
    for (const auto& e : lat.edges_from(pos))
      out << e.begin << ' ' << e.end << ' ' << e.token_id << ' '
          << format_double(e.log_prob) << '\n';
}

}  // namespace stochtok
