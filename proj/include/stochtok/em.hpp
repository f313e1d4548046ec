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

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "stochtok/common.hpp"
#include "stochtok/lattice.hpp"
#include "stochtok/unigram.hpp"
#include "stochtok/vocab.hpp"

namespace stochtok {

struct EmConfig {
  int max_iterations = 50;
  double tolerance = 1e-6;  // relative log-likelihood improvement
  int jobs = 1;
};

struct EmState {
  int iterations = 0;
  // Marginal log-likelihood of the model entering each iteration;
  // non-decreasing up to floating-point slack.
  std::vector<double> log_likelihood_trace;
};

namespace detail {

struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;

  void add(double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

// Ids of tokens lying on at least one complete path of the lattice. Edge
// sets depend only on (vocabulary, text), so this is fixed across EM
// iterations.
inline void collect_participating(const Lattice& lat,
                                  std::unordered_set<int32_t>& out) {
  const size_t n = lat.size();
  std::vector<char> from_start(n + 1, 0), to_end(n + 1, 0);
  from_start[0] = 1;
  for (size_t pos = 0; pos < n; ++pos) {
    if (!from_start[pos]) continue;
    for (const auto& e : lat.edges_from(pos)) from_start[e.end] = 1;
  }
  to_end[n] = 1;
  for (size_t pos = n; pos-- > 0;)
    for (const auto& e : lat.edges_from(pos))
      if (to_end[e.end]) to_end[pos] = 1;
  if (!to_end[0])
    throw DataError("document has no representable segmentation");
  for (size_t pos = 0; pos < n; ++pos)
    for (const auto& e : lat.edges_from(pos))
      if (from_start[e.begin] && to_end[e.end]) out.insert(e.token_id);
}

// Marked bytes for lattice construction: text documents go through the
// boundary-marker rewrite, id documents are plain piece concatenations.
// Special ids in pre-tokenized documents are protocol framing, not content;
// they carry probability one and never appear as lattice edges, so they are
// dropped here.
inline std::string doc_marked_bytes(const Vocabulary& v, const Doc& doc) {
  if (std::holds_alternative<std::string>(doc))
    return normalize_text(v, std::get<std::string>(doc));
  std::string bytes;
  for (const int32_t id : std::get<std::vector<int32_t>>(doc))
    if (!v.is_special(id)) bytes += v.piece(id);
  return bytes;
}

}  // namespace detail

// Uniform model over non-special tokens; the default EM init when no
// counting estimate is available.
inline UnigramModel uniform_model(const Vocabulary& v) {
  UnigramModel model;
  size_t regular = 0;
  for (const int32_t id : v.sorted_ids())
    if (!v.is_special(id)) ++regular;
  if (regular == 0) throw DataError("vocabulary has no non-special tokens");
  const double lp = -std::log(static_cast<double>(regular));
  for (const int32_t id : v.sorted_ids()) {
    if (v.is_special(id)) {
      model.log_probs[id] = 0.0;
      model.specials.insert(id);
    } else {
      model.log_probs[id] = lp;
    }
  }
  model.floor_log_prob = lp;
  return model;
}

// Expectation-Maximization for the unigram probabilities: the E-step takes
// expected token counts from each document's lattice posterior
// (forward-backward), the M-step renormalizes them. Stops after
// cfg.max_iterations or when the relative log-likelihood improvement drops
// under cfg.tolerance. Documents are processed into per-document slots and
// reduced in document order with compensated summation, so thread count
// cannot change the result.
inline std::pair<UnigramModel, EmState> estimate_em(
    const std::vector<Doc>& corpus, const Vocabulary& v,
    const UnigramModel& init, const EmConfig& cfg = {}) {
  if (corpus.empty()) throw DataError("EM requires a nonempty corpus");
  for (const int32_t id : v.sorted_ids())
    if (!init.contains(id))
      throw DataError("EM init model does not cover token id " +
                      std::to_string(id));

  std::vector<std::string> marked;
  marked.reserve(corpus.size());
  for (const Doc& doc : corpus)
    marked.push_back(detail::doc_marked_bytes(v, doc));

  // Tokens on no complete path anywhere in the corpus can never earn mass;
  // they take the floor. Participating tokens always keep their exact
  // M-step value, clamped away from zero if the posterior underflows —
  // flooring those instead would push the model off the EM path and break
  // likelihood monotonicity.
  std::unordered_set<int32_t> participating;
  for (const std::string& bytes : marked)
    detail::collect_participating(build_lattice_marked(init, v, bytes),
                                  participating);

  UnigramModel model = init;
  EmState state;

  for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
    std::vector<std::unordered_map<int32_t, double>> doc_expected(marked.size());
    std::vector<double> doc_log_mass(marked.size(), 0.0);
    parallel_for(marked.size(), cfg.jobs, [&](size_t d) {
      const Lattice lat = build_lattice_marked(model, v, marked[d]);
      auto [expected, log_z] = expected_token_counts(lat);
      doc_expected[d] = std::move(expected);
      doc_log_mass[d] = log_z;
    });

    detail::KahanSum log_likelihood;
    for (const double z : doc_log_mass) log_likelihood.add(z);

    std::unordered_map<int32_t, detail::KahanSum> expected;
    for (const auto& doc : doc_expected)
      for (const auto& [id, e] : doc) expected[id].add(e);

    detail::KahanSum total;
    for (const int32_t id : v.sorted_ids()) {
      const auto it = expected.find(id);
      if (it != expected.end()) total.add(it->second.sum);
    }
    if (total.sum <= 0.0)
      throw DataError("EM collected no expected counts");

    UnigramModel next;
    const double log_total = std::log(total.sum);
    next.floor_log_prob = std::log(0.1 / total.sum);
    constexpr double kTinyExpected = 1e-300;
    for (const int32_t id : v.sorted_ids()) {
      if (v.is_special(id)) {
        next.log_probs[id] = 0.0;
        next.specials.insert(id);
        continue;
      }
      if (!participating.count(id)) {
        next.log_probs[id] = next.floor_log_prob;
        continue;
      }
      const auto it = expected.find(id);
      const double e =
          it != expected.end() ? std::max(it->second.sum, kTinyExpected)
                               : kTinyExpected;
      next.log_probs[id] = std::log(e) - log_total;
    }
    model = std::move(next);

    state.log_likelihood_trace.push_back(log_likelihood.sum);
    state.iterations = iter;
    const size_t k = state.log_likelihood_trace.size();
    if (k >= 2) {
      const double prev = state.log_likelihood_trace[k - 2];
      const double cur = state.log_likelihood_trace[k - 1];
      const double denom = std::abs(prev) > 0.0 ? std::abs(prev) : 1.0;
      if ((cur - prev) / denom < cfg.tolerance) break;
    }
  }

  return {std::move(model), std::move(state)};
}

}  // namespace stochtok
