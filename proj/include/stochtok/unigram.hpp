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
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "stochtok/common.hpp"
#include "stochtok/vocab.hpp"

namespace stochtok {

// Token occurrence counts. `total` sums non-special occurrences only;
// special-token occurrences are tracked but never enter the normalizer.
struct CountTable {
  std::unordered_map<int32_t, uint64_t> counts;
  uint64_t total = 0;

  void add(int32_t id, bool special, uint64_t n = 1) {
    counts[id] += n;
    if (!special) total += n;
  }

  void merge(const CountTable& other) {
    for (const auto& [id, n] : other.counts) counts[id] += n;
    total += other.total;
  }
};

// Per-token natural-log probabilities. Special tokens are pinned to
// log-prob 0; in-vocabulary tokens never observed get `floor_log_prob` so
// every token stays usable in the lattice. Normalization is defined over
// non-special tokens only. Immutable by convention after construction.
struct UnigramModel {
  std::unordered_map<int32_t, double> log_probs;
  std::unordered_set<int32_t> specials;
  double floor_log_prob = kNegInf;

  double log_prob(int32_t id) const {
    const auto it = log_probs.find(id);
    if (it == log_probs.end())
      throw DataError("token id " + std::to_string(id) + " not in model");
    return it->second;
  }

  bool contains(int32_t id) const { return log_probs.count(id) != 0; }
};

// A corpus document: raw text, or a pre-tokenized id sequence.
using Doc = std::variant<std::string, std::vector<int32_t>>;

// Pull-based document stream; returns nullopt at end of corpus. Streams are
// single-pass; counting never materializes the corpus.
using DocStream = std::function<std::optional<Doc>()>;

inline DocStream stream_docs(std::vector<Doc> docs) {
  auto state = std::make_shared<std::pair<std::vector<Doc>, size_t>>(
      std::move(docs), 0);
  return [state]() -> std::optional<Doc> {
    if (state->second >= state->first.size()) return std::nullopt;
    return state->first[state->second++];
  };
}

// One document per line, UTF-8 text.
inline DocStream stream_text_file(const std::string& path) {
  auto in = std::make_shared<std::ifstream>(path, std::ios::binary);
  if (!*in) throw DataError("cannot open corpus file: " + path);
  return [in]() -> std::optional<Doc> {
    std::string line;
    if (!std::getline(*in, line)) return std::nullopt;
    return Doc(std::move(line));
  };
}

// One document per line, whitespace-separated token ids.
inline DocStream stream_id_file(const std::string& path) {
  auto in = std::make_shared<std::ifstream>(path, std::ios::binary);
  if (!*in) throw DataError("cannot open corpus file: " + path);
  return [in, path]() -> std::optional<Doc> {
    std::string line;
    if (!std::getline(*in, line)) return std::nullopt;
    std::vector<int32_t> ids;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) ids.push_back(static_cast<int32_t>(parse_int(tok)));
    return Doc(std::move(ids));
  };
}

// Every regular file in the directory, in sorted name order, one text
// document per line.
inline DocStream stream_text_directory(const std::string& path) {
  std::vector<std::string> files;
  for (const auto& entry : std::filesystem::directory_iterator(path))
    if (entry.is_regular_file()) files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no corpus files in directory: " + path);
  struct State {
    std::vector<std::string> files;
    size_t next_file = 0;
    std::optional<DocStream> current;
  };
  auto state = std::make_shared<State>();
  state->files = std::move(files);
  return [state]() -> std::optional<Doc> {
    for (;;) {
      if (!state->current) {
        if (state->next_file >= state->files.size()) return std::nullopt;
        state->current = stream_text_file(state->files[state->next_file++]);
      }
      if (auto doc = (*state->current)()) return doc;
      state->current.reset();
    }
  };
}

namespace detail {

inline void count_doc(const Doc& doc, const Vocabulary& v, CountTable& table) {
  if (std::holds_alternative<std::string>(doc)) {
    for (const int32_t id : bpe_encode(v, std::get<std::string>(doc)))
      table.add(id, v.is_special(id));
  } else {
    for (const int32_t id : std::get<std::vector<int32_t>>(doc)) {
      if (!v.contains(id))
        throw DataError("corpus token id " + std::to_string(id) +
                        " not in vocabulary");
      table.add(id, v.is_special(id));
    }
  }
}

}  // namespace detail

// Counts canonical-BPE tokens over a document stream. Text documents go
// through bpe_encode; id documents are counted directly. With jobs > 1 the
// stream is consumed by a worker pool into per-worker tables merged by
// summation, so shard boundaries and document order cannot change the
// result. An empty corpus yields total == 0; estimators reject that later.
inline CountTable count_corpus(const DocStream& stream, const Vocabulary& v,
                               int jobs = 1) {
  if (jobs <= 1) {
    CountTable table;
    while (auto doc = stream()) detail::count_doc(*doc, v, table);
    return table;
  }

  std::mutex stream_mu;
  std::vector<CountTable> partials(jobs);
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex err_mu;
  constexpr size_t kBatch = 64;
  for (int w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w] {
      std::vector<Doc> batch;
      try {
        for (;;) {
          batch.clear();
          {
            std::lock_guard<std::mutex> lock(stream_mu);
            while (batch.size() < kBatch) {
              auto doc = stream();
              if (!doc) break;
              batch.push_back(std::move(*doc));
            }
          }
          if (batch.empty()) return;
          for (const Doc& doc : batch) detail::count_doc(doc, v, partials[w]);
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  CountTable table;
  for (const auto& partial : partials) table.merge(partial);
  return table;
}

// log p(t) = log(counts(t) / N) over non-special tokens. Special tokens get
// log-prob 0; unseen non-special tokens get the ln(0.1/N) floor so byte
// fallback stays live without outscoring anything observed.
inline UnigramModel estimate_counting(const CountTable& c, const Vocabulary& v) {
  if (c.total == 0)
    throw DataError("cannot estimate unigram model from zero counted tokens");
  UnigramModel model;
  const double n = static_cast<double>(c.total);
  model.floor_log_prob = std::log(0.1 / n);
  for (const int32_t id : v.sorted_ids()) {
    if (v.is_special(id)) {
      model.log_probs[id] = 0.0;
      model.specials.insert(id);
      continue;
    }
    const auto it = c.counts.find(id);
    if (it != c.counts.end() && it->second > 0)
      model.log_probs[id] = std::log(static_cast<double>(it->second) / n);
    else
      model.log_probs[id] = model.floor_log_prob;
  }
  return model;
}

inline constexpr std::string_view kModelHeader = "#stochtok-unigram v1";

// TSV rows `token_id<TAB>token_string<TAB>log_prob`, one per token, sorted
// by id, log probabilities at full round-trip precision.
inline void save_model(const UnigramModel& m, const Vocabulary& v,
                       std::ostream& out) {
  out << kModelHeader << '\n';
  for (const int32_t id : v.sorted_ids()) {
    const auto it = m.log_probs.find(id);
    if (it == m.log_probs.end())
      throw DataError("model does not cover token id " + std::to_string(id));
    out << id << '\t' << v.display_piece(id) << '\t'
        << format_double(it->second) << '\n';
  }
  if (!out) throw DataError("failed writing model file");
}

inline void save_model(const UnigramModel& m, const Vocabulary& v,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open model file for writing: " + path);
  save_model(m, v, out);
}

namespace detail {

struct ModelRow {
  int32_t id;
  std::string piece;
  std::string value;
};

template <typename RowFn>
inline void parse_model_tsv(std::istream& in, RowFn&& on_row) {
  std::string line;
  if (!std::getline(in, line) || line != kModelHeader)
    throw DataError(std::string("model file missing header '") +
                    std::string(kModelHeader) + "'");
  std::unordered_set<int32_t> seen;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? std::string::npos
                                              : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw DataError("model file line " + std::to_string(lineno) +
                      ": expected 3 tab-separated fields");
    ModelRow row;
    row.id = static_cast<int32_t>(parse_int(line.substr(0, t1)));
    row.piece = line.substr(t1 + 1, t2 - t1 - 1);
    row.value = line.substr(t2 + 1);
    if (!seen.insert(row.id).second)
      throw DataError("model file: duplicate token id " +
                      std::to_string(row.id));
    on_row(row);
  }
}

}  // namespace detail

// Loads a model TSV. When a vocabulary is supplied, every row is
// cross-validated against it and special ids are re-pinned from it.
inline UnigramModel load_model(std::istream& in,
                               const Vocabulary* v = nullptr) {
  UnigramModel model;
  detail::parse_model_tsv(in, [&](const detail::ModelRow& row) {
    if (v != nullptr) {
      if (!v->contains(row.id))
        throw DataError("model row id " + std::to_string(row.id) +
                        " not in vocabulary");
      if (v->display_piece(row.id) != row.piece)
        throw DataError("model row id " + std::to_string(row.id) +
                        " token string mismatch with vocabulary");
      if (v->is_special(row.id)) model.specials.insert(row.id);
    }
    model.log_probs.emplace(row.id, parse_double(row.value));
  });
  double min_nonspecial = 0.0;
  for (const auto& [id, lp] : model.log_probs)
    if (!model.specials.count(id)) min_nonspecial = std::min(min_nonspecial, lp);
  model.floor_log_prob = min_nonspecial;
  return model;
}

inline UnigramModel load_model(const std::string& path,
                               const Vocabulary* v = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file: " + path);
  return load_model(in, v);
}

// A pre-computed count file in the model TSV layout, counts in place of
// log probabilities. Covers corpora where only token-level counts exist.
inline CountTable load_count_table(const std::string& path,
                                   const Vocabulary& v) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open count file: " + path);
  CountTable table;
  detail::parse_model_tsv(in, [&](const detail::ModelRow& row) {
    if (!v.contains(row.id))
      throw DataError("count row id " + std::to_string(row.id) +
                      " not in vocabulary");
    const int64_t n = parse_int(row.value);
    if (n < 0)
      throw DataError("negative count for token id " + std::to_string(row.id));
    if (n > 0) table.add(row.id, v.is_special(row.id), static_cast<uint64_t>(n));
  });
  return table;
}

}  // namespace stochtok
