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

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "stochtok/common.hpp"
#include "stochtok/harness.hpp"
#include "stochtok/lattice.hpp"
#include "stochtok/sampler.hpp"
#include "stochtok/unigram.hpp"
#include "stochtok/vocab.hpp"

namespace testsupport {

// a=0, b=1, ab=2 with the single merge (a, b); no marker, no specials.
inline stochtok::Vocabulary toy_vocab() {
  return stochtok::Vocabulary({{0, "a"}, {1, "b"}, {2, "ab"}}, {},
                              {{"a", "b"}}, "");
}

// p(a)=0.5, p(b)=0.2, p(ab)=0.3 on the toy vocabulary.
inline stochtok::UnigramModel toy_model() {
  stochtok::UnigramModel m;
  m.log_probs = {{0, std::log(0.5)}, {1, std::log(0.2)}, {2, std::log(0.3)}};
  return m;
}

// 256 byte-fallback tokens at ids 0..255 plus a few multi-byte pieces.
inline stochtok::Vocabulary fallback_vocab() {
  std::unordered_map<int32_t, std::string> entries;
  std::unordered_map<int32_t, std::string> raw;
  for (int b = 0; b < 256; ++b) {
    char piece[8];
    std::snprintf(piece, sizeof(piece), "<0x%02X>", b);
    entries.emplace(b, std::string(1, static_cast<char>(b)));
    raw.emplace(b, piece);
  }
  entries.emplace(256, "ab");
  entries.emplace(257, "abc");
  entries.emplace(258, "the");
  std::vector<stochtok::MergeRule> merges = {{"a", "b"}, {"ab", "c"},
                                             {"t", "h"}, {"th", "e"}};
  entries.emplace(259, "th");
  return stochtok::Vocabulary(std::move(entries), {}, std::move(merges), "",
                              std::move(raw));
}

inline stochtok::UnigramModel flat_model(const stochtok::Vocabulary& v) {
  stochtok::CountTable counts;
  for (const int32_t id : v.sorted_ids())
    if (!v.is_special(id)) counts.add(id, false);
  return stochtok::estimate_counting(counts, v);
}

class TempDir {
 public:
  TempDir() {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0;; ++i) {
      auto candidate = base / ("stochtok_test_" + std::to_string(::getpid()) +
                               "_" + std::to_string(counter_++));
      std::error_code ec;
      if (std::filesystem::create_directory(candidate, ec)) {
        path_ = candidate;
        return;
      }
      if (i > 1000) throw std::runtime_error("cannot create temp dir");
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const {
    return (path_ / name).string();
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  return content;
}

// A random small vocabulary + model + string whose lattice stays under the
// segmentation cap, for oracle-vs-implementation property tests.
struct RandomInstance {
  stochtok::Vocabulary vocab;
  stochtok::UnigramModel model;
  std::string text;
};

inline RandomInstance make_random_instance(stochtok::SplitMix64& rng,
                                           size_t max_segmentations = 200,
                                           size_t max_text_len = 8) {
  for (;;) {
    std::set<std::string> pieces = {"a", "b", "c"};
    const int extra = 2 + static_cast<int>(rng.next() % 8);
    for (int i = 0; i < extra; ++i) {
      const size_t len = 2 + rng.next() % 2;
      std::string p;
      for (size_t j = 0; j < len; ++j)
        p += static_cast<char>('a' + rng.next() % 3);
      pieces.insert(p);
    }

    std::unordered_map<int32_t, std::string> entries;
    int32_t id = 0;
    for (const auto& p : pieces) entries.emplace(id++, p);
    stochtok::Vocabulary vocab(std::move(entries), {}, {}, "");

    stochtok::UnigramModel model;
    double total = 0.0;
    std::vector<double> weights;
    for (size_t i = 0; i < pieces.size(); ++i) {
      weights.push_back(0.05 + rng.uniform());
      total += weights.back();
    }
    for (int32_t i = 0; i < static_cast<int32_t>(pieces.size()); ++i)
      model.log_probs[i] = std::log(weights[i] / total);

    const size_t text_len = 1 + rng.next() % max_text_len;
    std::string text;
    for (size_t i = 0; i < text_len; ++i)
      text += static_cast<char>('a' + rng.next() % 3);

    const auto lat = stochtok::build_lattice(model, vocab, text);
    try {
      stochtok::enumerate_all(lat, max_segmentations);
    } catch (const stochtok::DataError&) {
      continue;  // over the cap; draw another instance
    }
    return {std::move(vocab), std::move(model), std::move(text)};
  }
}

// The scripted four-item protocol: per item, the three sampled prompt
// tokenizations answer {correct, correct, wrong}, the three CoT+SC paths
// answer {wrong, wrong, correct}, and baselines are correct on the first
// two items only, giving the hand-computed report
//   baseline 50%, CoT+SC majority 0%, probabilistic majority 100%,
//   both oracles 100%.
// Every response is pinned; an unscripted request throws. kScriptedSeed is
// chosen so each item's three sampled tokenizations are distinct.
inline constexpr uint64_t kScriptedSeed = 6;

struct ScriptedEval {
  std::vector<stochtok::TaskItem> items;
  stochtok::MockBackend mock;
  stochtok::EvalConfig cfg;
};

inline ScriptedEval make_scripted_eval(const stochtok::UnigramModel& model,
                                       const stochtok::Vocabulary& vocab) {
  using namespace stochtok;
  ScriptedEval s;
  s.items = {{"q1", "abababab", "90", "{question}"},
             {"q2", "ababababab", "90", "{question}"},
             {"q3", "abababababab", "90", "{question}"},
             {"q4", "ababababababab", "90", "{question}"}};
  s.cfg.sample.m = 3;
  s.cfg.sample.seed = kScriptedSeed;

  const std::string correct = "The answer is $90.";
  const std::string wrong = "The answer is $270.";

  for (size_t i = 0; i < s.items.size(); ++i) {
    const std::string prompt = render_prompt(s.items[i]);
    const std::vector<int32_t> canonical = bpe_encode(vocab, prompt);

    SampleConfig sample_cfg = s.cfg.sample;
    sample_cfg.seed =
        derive_path_seed(kScriptedSeed, i, Condition::kProbabilistic, 0);
    const auto toks = sample_m(model, vocab, prompt, sample_cfg);
    if (distinct_tokenizations(toks) != 3)
      throw std::runtime_error("scripted fixture: sampled triple not distinct");

    // Greedy responses are a function of the prompt ids alone, so the
    // baseline and any probabilistic path that sampled the canonical
    // tokenization must agree; pick the wrong-answer slot accordingly.
    std::map<std::vector<int32_t>, std::string> greedy;
    const bool baseline_correct = i < 2;
    size_t wrong_slot = 2;
    for (size_t p = 0; p < 3; ++p) {
      if (toks[p].ids != canonical) continue;
      wrong_slot = baseline_correct ? (p + 1) % 3 : p;
    }
    for (size_t p = 0; p < 3; ++p)
      greedy[toks[p].ids] = p == wrong_slot ? wrong : correct;
    if (!greedy.count(canonical))
      greedy[canonical] = baseline_correct ? correct : wrong;
    if ((greedy.at(canonical) == correct) != baseline_correct)
      throw std::runtime_error("scripted fixture: baseline conflict");

    for (const auto& [ids, text] : greedy)
      s.mock.add_rule({ids, DecodeMode::kGreedy, std::nullopt, text});
    for (int p = 0; p < 3; ++p) {
      const uint64_t seed =
          derive_path_seed(kScriptedSeed, i, Condition::kCotSc, p);
      s.mock.add_rule(
          {canonical, DecodeMode::kSample, seed, p == 2 ? correct : wrong});
    }
  }
  return s;
}

}  // namespace testsupport
