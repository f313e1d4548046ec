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
#include <queue>
#include <set>
#include <string_view>
#include <utility>
#include <vector>

#include "stochtok/common.hpp"
#include "stochtok/lattice.hpp"
#include "stochtok/unigram.hpp"
#include "stochtok/vocab.hpp"

namespace stochtok {

struct SampleConfig {
  enum class Mode {
    kExact,  // i.i.d. draws from all possible tokenizations (l -> infinity)
    kLBest,  // alpha-smoothed draws over the l best tokenizations
  };

  int m = 64;
  Mode mode = Mode::kExact;
  int l = 0;  // LBest candidate count; 0 means the m*m comparison preset
  double alpha = 1.0;
  uint64_t seed = 0;
};

namespace detail {

// Max log-probability of any segmentation of bytes[0..q), the exact A*
// heuristic for backward search.
inline std::vector<double> viterbi_forward(const Lattice& lat) {
  std::vector<double> best(lat.size() + 1, kNegInf);
  best[0] = 0.0;
  for (size_t pos = 0; pos < lat.size(); ++pos) {
    if (best[pos] == kNegInf) continue;
    for (const auto& e : lat.edges_from(pos))
      best[e.end] = std::max(best[e.end], best[pos] + e.log_prob);
  }
  return best;
}

}  // namespace detail

// Exact k-best segmentations via Forward-DP Backward-A*: hypotheses grow
// backward from the end of the string; the forward Viterbi score is an
// admissible, consistent heuristic, so completions pop in non-increasing
// score order and nothing outside the result can outscore anything inside
// it. Score ties are resolved by collecting every completion within a hair
// of the k-th score and sorting on (log_prob desc, ids lex asc), so
// equal-score distinct segmentations are never conflated and the result
// matches brute-force enumeration exactly.
inline std::vector<Tokenization> kbest(const Lattice& lat, size_t k) {
  if (k < 1) throw DataError("kbest requires k >= 1");
  if (!lat.has_segmentation())
    throw DataError("no valid segmentation of the input");
  if (lat.size() == 0) return {Tokenization{}};

  const std::vector<double> best = detail::viterbi_forward(lat);

  struct Hyp {
    uint32_t pos;
    double g;  // accumulated edge scores from the end down to pos
    double edge_lp;
    int32_t token;
    int32_t parent;
  };
  std::vector<Hyp> arena;
  // Max-heap on f = g + best[pos]; index breaks exact ties deterministically.
  using Entry = std::pair<double, int32_t>;
  std::priority_queue<Entry> agenda;

  arena.push_back({static_cast<uint32_t>(lat.size()), 0.0, 0.0, -1, -1});
  agenda.push({best[lat.size()], 0});

  constexpr double kTieSlack = 1e-12;
  std::vector<Tokenization> completed;
  double kth_score = kNegInf;

  while (!agenda.empty()) {
    const auto [f, hi] = agenda.top();
    agenda.pop();
    if (completed.size() >= k && f < kth_score - kTieSlack) break;
    const Hyp hyp = arena[hi];

    if (hyp.pos == 0) {
      // Parent chain yields tokens in sentence order; rescore in that order
      // so results compare bit-for-bit with enumeration.
      Tokenization t;
      t.log_prob = 0.0;
      for (int32_t cur = hi; arena[cur].token >= 0; cur = arena[cur].parent) {
        t.ids.push_back(arena[cur].token);
        t.log_prob += arena[cur].edge_lp;
      }
      completed.push_back(std::move(t));
      if (completed.size() == k) kth_score = f;
      continue;
    }

    for (const auto& e : lat.edges_into(hyp.pos)) {
      if (best[e.begin] == kNegInf) continue;
      const double g = hyp.g + e.log_prob;
      arena.push_back({e.begin, g, e.log_prob, e.token_id, hi});
      agenda.push({g + best[e.begin], static_cast<int32_t>(arena.size()) - 1});
    }
  }

  std::sort(completed.begin(), completed.end(),
            [](const Tokenization& a, const Tokenization& b) {
              if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
              return a.ids < b.ids;
            });
  if (completed.size() > k) completed.resize(k);
  return completed;
}

// The single best segmentation; ties fall to the lexicographically
// smallest id sequence.
inline Tokenization viterbi(const Lattice& lat) { return kbest(lat, 1).front(); }

// Draws exact i.i.d. samples from Pr(x_tok | X): forward filtering once,
// then each draw walks backward from the end picking incoming edges with
// probability exp(forward[begin] + log p(t) - forward[end]). Per-position
// choice tables are precomputed so repeated draws cost only the walk.
class BackwardSampler {
 public:
  explicit BackwardSampler(const Lattice& lat) : lat_(lat) {
    if (!lat.has_segmentation())
      throw DataError("no valid segmentation of the input");
    const auto& fwd = lat.forward_log_mass();
    choice_probs_.resize(lat.size() + 1);
    for (size_t pos = 1; pos <= lat.size(); ++pos) {
      if (fwd[pos] == kNegInf) continue;
      const auto& incoming = lat.edges_into(pos);
      auto& probs = choice_probs_[pos];
      probs.reserve(incoming.size());
      for (const auto& e : incoming) {
        probs.push_back(fwd[e.begin] == kNegInf
                            ? 0.0
                            : std::exp(fwd[e.begin] + e.log_prob - fwd[pos]));
      }
    }
  }

  // Probabilities aligned with edges_into(pos); each sums to 1 over the
  // incoming edges of a reachable position.
  const std::vector<double>& choice_probs(size_t pos) const {
    return choice_probs_[pos];
  }

  Tokenization draw(SplitMix64& rng) const {
    std::vector<int32_t> rev_ids;
    std::vector<double> rev_lps;
    size_t pos = lat_.size();
    while (pos > 0) {
      const auto& probs = choice_probs_[pos];
      const auto& incoming = lat_.edges_into(pos);
      const double u = rng.uniform();
      double acc = 0.0;
      size_t chosen = incoming.size();
      for (size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        chosen = i;
        if (u < acc) break;
      }
      const auto& e = incoming[chosen];
      rev_ids.push_back(e.token_id);
      rev_lps.push_back(e.log_prob);
      pos = e.begin;
    }
    Tokenization t;
    t.ids.assign(rev_ids.rbegin(), rev_ids.rend());
    t.log_prob = 0.0;
    for (auto it = rev_lps.rbegin(); it != rev_lps.rend(); ++it)
      t.log_prob += *it;
    return t;
  }

 private:
  const Lattice& lat_;
  std::vector<std::vector<double>> choice_probs_;
};

// One exact posterior draw. For many draws from one lattice, construct a
// BackwardSampler once instead.
inline Tokenization ffbs_sample(const Lattice& lat, SplitMix64& rng) {
  return BackwardSampler(lat).draw(rng);
}

namespace detail {

inline std::vector<Tokenization> sample_categorical(
    const std::vector<Tokenization>& candidates, double alpha, int m,
    SplitMix64& rng) {
  // alpha applied in log space and normalized by log-sum-exp, so large
  // alpha or long strings cannot overflow.
  std::vector<double> weights(candidates.size());
  double log_z = kNegInf;
  for (size_t i = 0; i < candidates.size(); ++i) {
    weights[i] = alpha * candidates[i].log_prob;
    log_z = log_add_exp(log_z, weights[i]);
  }
  std::vector<double> probs(candidates.size());
  for (size_t i = 0; i < candidates.size(); ++i)
    probs[i] = std::exp(weights[i] - log_z);

  std::vector<Tokenization> out;
  out.reserve(m);
  for (int s = 0; s < m; ++s) {
    const double u = rng.uniform();
    double acc = 0.0;
    size_t chosen = candidates.size() - 1;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) {
        chosen = i;
        break;
      }
    }
    out.push_back(candidates[chosen]);
  }
  return out;
}

}  // namespace detail

// Samples m tokenizations of `text`. Exact mode draws i.i.d. from all
// possible tokenizations; LBest mode draws from the alpha-smoothed
// categorical over the l best. Duplicates among the m samples are kept
// (true i.i.d.); distinct_tokenizations() reports the spread. Deterministic
// given cfg.seed.
inline std::vector<Tokenization> sample_m(const UnigramModel& m,
                                          const Vocabulary& v,
                                          std::string_view text,
                                          const SampleConfig& cfg) {
  if (cfg.m < 1) throw DataError("sample count m must be >= 1");
  if (cfg.alpha < 0) throw DataError("alpha must be >= 0");
  const Lattice lat = build_lattice(m, v, text);
  if (!lat.has_segmentation())
    throw DataError("no valid segmentation of the input");
  SplitMix64 rng(cfg.seed);

  if (cfg.mode == SampleConfig::Mode::kExact) {
    const BackwardSampler sampler(lat);
    std::vector<Tokenization> out;
    out.reserve(cfg.m);
    for (int s = 0; s < cfg.m; ++s) out.push_back(sampler.draw(rng));
    return out;
  }

  const size_t l = cfg.l > 0 ? static_cast<size_t>(cfg.l)
                             : static_cast<size_t>(cfg.m) * cfg.m;
  const std::vector<Tokenization> candidates = kbest(lat, l);
  if (candidates.empty())
    throw DataError("l-best search returned no candidates");
  return detail::sample_categorical(candidates, cfg.alpha, cfg.m, rng);
}

inline size_t distinct_tokenizations(const std::vector<Tokenization>& samples) {
  std::set<std::vector<int32_t>> seen;
  for (const auto& t : samples) seen.insert(t.ids);
  return seen.size();
}

}  // namespace stochtok
