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
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stochtok/common.hpp"
#include "stochtok/sampler.hpp"
#include "stochtok/unigram.hpp"
#include "stochtok/vocab.hpp"

namespace stochtok {

// ---------------------------------------------------------------------------
// Task items
// ---------------------------------------------------------------------------

inline constexpr std::string_view kQuestionSlot = "{question}";

struct TaskItem {
  std::string id;
  std::string question;
  std::string gold_answer;
  std::string prompt_template;
};

inline void validate_item(const TaskItem& item) {
  if (item.gold_answer.empty())
    throw DataError("item '" + item.id + "': empty gold answer");
  const size_t first = item.prompt_template.find(kQuestionSlot);
  if (first == std::string::npos ||
      item.prompt_template.find(kQuestionSlot, first + 1) != std::string::npos)
    throw DataError("item '" + item.id +
                    "': template must contain exactly one {question} slot");
}

inline std::string render_prompt(const TaskItem& item) {
  validate_item(item);
  std::string prompt = item.prompt_template;
  prompt.replace(prompt.find(kQuestionSlot), kQuestionSlot.size(),
                 item.question);
  return prompt;
}

// JSON lines, one item per line: {"id", "question", "gold_answer", "template"}.
inline std::vector<TaskItem> load_items(std::istream& in) {
  std::vector<TaskItem> items;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("items file line " + std::to_string(lineno) + ": " +
                      e.what());
    }
    TaskItem item;
    try {
      item.id = j.at("id").is_string() ? j.at("id").get<std::string>()
                                       : j.at("id").dump();
      item.question = j.at("question").get<std::string>();
      item.gold_answer = j.at("gold_answer").get<std::string>();
      item.prompt_template = j.at("template").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("items file line " + std::to_string(lineno) + ": " +
                      e.what());
    }
    validate_item(item);
    items.push_back(std::move(item));
  }
  return items;
}

inline std::vector<TaskItem> load_items(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open items file: " + path);
  return load_items(in);
}

// ---------------------------------------------------------------------------
// Generation backend
// ---------------------------------------------------------------------------

enum class DecodeMode { kGreedy, kSample };

inline std::string_view to_string(DecodeMode mode) {
  return mode == DecodeMode::kGreedy ? "greedy" : "sample";
}

// The backend takes token ids, not text: distinct tokenizations of the same
// string must reach the model as distinct id sequences.
struct GenerateRequest {
  std::vector<int32_t> prompt_token_ids;
  int max_new_tokens = 256;
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 0.0;
  int top_k = 0;
  uint64_t seed = 0;
};

struct GenerateResult {
  std::string text;
  std::vector<int32_t> token_ids;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual GenerateResult generate(const GenerateRequest& req) = 0;
};

inline nlohmann::json request_to_json(const GenerateRequest& req) {
  return nlohmann::json{{"prompt_token_ids", req.prompt_token_ids},
                        {"max_new_tokens", req.max_new_tokens},
                        {"mode", std::string(to_string(req.mode))},
                        {"temperature", req.temperature},
                        {"top_k", req.top_k},
                        {"seed", req.seed}};
}

inline GenerateResult result_from_json(const nlohmann::json& j) {
  GenerateResult result;
  try {
    result.text = j.at("text").get<std::string>();
    if (j.contains("token_ids"))
      result.token_ids = j.at("token_ids").get<std::vector<int32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed backend payload: ") + e.what());
  }
  return result;
}

// In-process backend scripted from match rules; same request shape as the
// HTTP wire protocol. A rule matches when every field it pins equals the
// request's value; the first match wins.
class MockBackend : public Backend {
 public:
  struct Rule {
    std::optional<std::vector<int32_t>> prompt_ids;
    std::optional<DecodeMode> mode;
    std::optional<uint64_t> seed;
    std::string text;
  };

  MockBackend() = default;
  explicit MockBackend(std::vector<Rule> rules,
                       std::optional<std::string> default_text = std::nullopt)
      : rules_(std::move(rules)), default_text_(std::move(default_text)) {}

  void add_rule(Rule rule) { rules_.push_back(std::move(rule)); }
  void set_default(std::string text) { default_text_ = std::move(text); }

  GenerateResult generate(const GenerateRequest& req) override {
    for (const Rule& rule : rules_) {
      if (rule.prompt_ids && *rule.prompt_ids != req.prompt_token_ids) continue;
      if (rule.mode && *rule.mode != req.mode) continue;
      if (rule.seed && *rule.seed != req.seed) continue;
      return {rule.text, {}};
    }
    if (default_text_) return {*default_text_, {}};
    throw BackendError("mock backend: no scripted response for request");
  }

 private:
  std::vector<Rule> rules_;
  std::optional<std::string> default_text_;
};

// Script file: {"default": "...", "rules": [{"ids": [...], "mode": "greedy",
// "seed": 7, "text": "..."}]}, all match fields optional.
inline MockBackend parse_mock_script(const nlohmann::json& j) {
  std::vector<MockBackend::Rule> rules;
  if (j.contains("rules")) {
    for (const auto& r : j.at("rules")) {
      MockBackend::Rule rule;
      if (r.contains("ids"))
        rule.prompt_ids = r.at("ids").get<std::vector<int32_t>>();
      if (r.contains("mode")) {
        const auto mode = r.at("mode").get<std::string>();
        if (mode != "greedy" && mode != "sample")
          throw DataError("mock script: unknown mode '" + mode + "'");
        rule.mode = mode == "greedy" ? DecodeMode::kGreedy : DecodeMode::kSample;
      }
      if (r.contains("seed")) rule.seed = r.at("seed").get<uint64_t>();
      rule.text = r.at("text").get<std::string>();
      rules.push_back(std::move(rule));
    }
  }
  std::optional<std::string> default_text;
  if (j.contains("default")) default_text = j.at("default").get<std::string>();
  return MockBackend(std::move(rules), std::move(default_text));
}

inline MockBackend load_mock_script(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open mock script: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed mock script " + path + ": " + e.what());
  }
  return parse_mock_script(j);
}

// ---------------------------------------------------------------------------
// Answer extraction and voting
// ---------------------------------------------------------------------------

using Answer = std::optional<std::string>;

// Strips currency symbols, thousands commas, terminal punctuation and
// whitespace; single multiple-choice letters are uppercased.
inline std::string normalize_answer(std::string_view raw) {
  std::string s(raw);
  const auto trim = [&] {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
      s.erase(0, 1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
      s.pop_back();
  };
  trim();
  for (const std::string_view currency : {"$", "\xe2\x82\xac", "\xc2\xa3"}) {
    while (s.size() >= currency.size() &&
           std::string_view(s).substr(0, currency.size()) == currency)
      s.erase(0, currency.size());
  }
  s.erase(std::remove(s.begin(), s.end(), ','), s.end());
  const std::string_view terminal = ".,!?;:";
  while (!s.empty() && terminal.find(s.back()) != std::string_view::npos)
    s.pop_back();
  trim();
  if (s.size() == 1 && std::isalpha(static_cast<unsigned char>(s[0])))
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

inline constexpr std::string_view kDefaultAnswerMarker = "The answer is";

// Takes what follows the last occurrence of the marker (to the end of its
// line) and normalizes it; absent when no marker or nothing usable follows.
inline Answer extract_answer(std::string_view path_text,
                             std::string_view marker = kDefaultAnswerMarker) {
  const size_t pos = path_text.rfind(marker);
  if (pos == std::string_view::npos) return std::nullopt;
  std::string_view tail = path_text.substr(pos + marker.size());
  const size_t newline = tail.find('\n');
  if (newline != std::string_view::npos) tail = tail.substr(0, newline);
  std::string norm = normalize_answer(tail);
  if (norm.empty()) return std::nullopt;
  return norm;
}

// Most frequent present answer; absent entries never win; ties go to the
// answer whose first occurrence comes earliest.
inline Answer majority_vote(const std::vector<Answer>& answers) {
  if (answers.empty()) throw DataError("majority vote over an empty list");
  std::unordered_map<std::string, size_t> counts;
  std::unordered_map<std::string, size_t> first_seen;
  for (size_t i = 0; i < answers.size(); ++i) {
    if (!answers[i]) continue;
    ++counts[*answers[i]];
    first_seen.emplace(*answers[i], i);
  }
  Answer winner;
  size_t best_count = 0;
  size_t best_first = answers.size();
  for (size_t i = 0; i < answers.size(); ++i) {
    if (!answers[i]) continue;
    const size_t count = counts[*answers[i]];
    const size_t first = first_seen[*answers[i]];
    if (count > best_count || (count == best_count && first < best_first)) {
      winner = answers[i];
      best_count = count;
      best_first = first;
    }
  }
  return winner;
}

// Solved if any present answer matches gold after normalization.
inline bool oracle_hit(const std::vector<Answer>& answers,
                       std::string_view gold) {
  const std::string gold_norm = normalize_answer(gold);
  for (const Answer& a : answers)
    if (a && *a == gold_norm) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

enum class Condition { kBaseline = 0, kCotSc = 1, kProbabilistic = 2 };

inline std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::kBaseline: return "baseline";
    case Condition::kCotSc: return "cot_sc";
    case Condition::kProbabilistic: return "probabilistic";
  }
  return "?";
}

// Stream seed for one generation call. Derivation is part of the
// reproducibility contract: parallel and serial runs agree, and scripted
// mocks can pin per-path responses.
inline uint64_t derive_path_seed(uint64_t base_seed, size_t item_index,
                                 Condition condition, size_t path_index) {
  uint64_t s = mix_seed(base_seed, item_index);
  s = mix_seed(s, static_cast<uint64_t>(condition));
  return mix_seed(s, path_index);
}

struct EvalConfig {
  SampleConfig sample;           // m, mode, l, alpha, base seed
  double sc_temperature = 0.2;   // CoT+SC sampling temperature
  int sc_top_k = 64;             // CoT+SC top-k
  int max_new_tokens = 256;
  std::string answer_marker = std::string(kDefaultAnswerMarker);
  int jobs = 1;
};

struct PathLog {
  std::string item_id;
  std::string condition;
  int path_index = 0;
  std::vector<int32_t> prompt_token_ids;
  std::string text;
  Answer answer;
  bool failed = false;
};

struct EvalReport {
  int items_total = 0;
  int items_evaluated = 0;
  int items_failed = 0;
  int failed_paths = 0;

  // Accuracies in percent over evaluated items.
  double baseline = 0.0;
  double cot_sc_majority = 0.0;
  double cot_sc_oracle = 0.0;
  double prob_majority = 0.0;
  double prob_oracle = 0.0;

  // Relative change vs baseline in percent; absent when baseline is zero.
  std::optional<double> delta_cot_sc_majority;
  std::optional<double> delta_cot_sc_oracle;
  std::optional<double> delta_prob_majority;
  std::optional<double> delta_prob_oracle;

  double avg_distinct_tokenizations = 0.0;
  double avg_distinct_answers_cot_sc = 0.0;
  double avg_distinct_answers_prob = 0.0;

  std::vector<PathLog> logs;
};

namespace detail {

struct ItemEval {
  bool failed = false;
  std::string fail_reason;
  bool baseline_correct = false;
  bool cot_majority_correct = false;
  bool cot_oracle = false;
  bool prob_majority_correct = false;
  bool prob_oracle = false;
  size_t distinct_tokenizations = 0;
  size_t distinct_answers_cot = 0;
  size_t distinct_answers_prob = 0;
  int failed_paths = 0;
  std::vector<PathLog> logs;
};

inline size_t count_distinct(const std::vector<Answer>& answers) {
  std::vector<std::string> present;
  for (const Answer& a : answers)
    if (a) present.push_back(*a);
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  return present.size();
}

}  // namespace detail

// Runs the three-condition protocol over the items:
//   Baseline       canonical BPE prompt, greedy decoding, one path
//   CoT + SC       canonical BPE prompt, m sampled generations
//                  (temperature / top-k from cfg)
//   Probabilistic  m sampled prompt tokenizations, greedy decoding each
// Per-path transport failures degrade to absent answers; an item is marked
// failed (excluded from accuracies, counted in the report) when a whole
// condition produced nothing. Deterministic given the backend and seeds,
// including the audit logs.
inline EvalReport run_eval(const std::vector<TaskItem>& items,
                           const UnigramModel& model, const Vocabulary& v,
                           Backend& backend, const EvalConfig& cfg) {
  if (items.empty()) throw DataError("run_eval requires at least one item");
  if (cfg.sample.m < 1) throw DataError("eval m must be >= 1");
  for (const TaskItem& item : items) validate_item(item);

  const uint64_t base_seed = cfg.sample.seed;
  const int m = cfg.sample.m;
  std::vector<detail::ItemEval> slots(items.size());

  parallel_for(items.size(), cfg.jobs, [&](size_t i) {
    const TaskItem& item = items[i];
    detail::ItemEval& out = slots[i];
    const std::string gold = normalize_answer(item.gold_answer);
    const std::string prompt = render_prompt(item);

    const auto log_path = [&](Condition c, int path, std::vector<int32_t> ids,
                              std::string text, Answer answer, bool failed) {
      out.logs.push_back({item.id, std::string(to_string(c)), path,
                          std::move(ids), std::move(text), std::move(answer),
                          failed});
    };

    // One generation; a transport failure becomes an absent answer and
    // bumps the per-condition failure count.
    int condition_failures[3] = {0, 0, 0};
    const auto generate_path = [&](Condition c, int path,
                                   const std::vector<int32_t>& ids,
                                   DecodeMode mode) -> Answer {
      GenerateRequest req;
      req.prompt_token_ids = ids;
      req.max_new_tokens = cfg.max_new_tokens;
      req.mode = mode;
      if (mode == DecodeMode::kSample) {
        req.temperature = cfg.sc_temperature;
        req.top_k = cfg.sc_top_k;
      }
      req.seed = derive_path_seed(base_seed, i, c, static_cast<size_t>(path));
      try {
        const GenerateResult result = backend.generate(req);
        Answer answer = extract_answer(result.text, cfg.answer_marker);
        log_path(c, path, ids, result.text, answer, false);
        return answer;
      } catch (const BackendError& e) {
        ++out.failed_paths;
        ++condition_failures[static_cast<int>(c)];
        log_path(c, path, ids, std::string("[backend error] ") + e.what(),
                 std::nullopt, true);
        return std::nullopt;
      }
    };

    try {
      const std::vector<int32_t> canonical = bpe_encode(v, prompt);

      const Answer base_answer =
          generate_path(Condition::kBaseline, 0, canonical, DecodeMode::kGreedy);
      out.baseline_correct = base_answer && *base_answer == gold;

      std::vector<Answer> cot_answers;
      for (int p = 0; p < m; ++p)
        cot_answers.push_back(generate_path(Condition::kCotSc, p, canonical,
                                            DecodeMode::kSample));
      const Answer cot_majority = majority_vote(cot_answers);
      out.cot_majority_correct = cot_majority && *cot_majority == gold;
      out.cot_oracle = oracle_hit(cot_answers, item.gold_answer);
      out.distinct_answers_cot = detail::count_distinct(cot_answers);

      SampleConfig sample_cfg = cfg.sample;
      sample_cfg.seed =
          derive_path_seed(base_seed, i, Condition::kProbabilistic, 0);
      const std::vector<Tokenization> tokenizations =
          sample_m(model, v, prompt, sample_cfg);
      out.distinct_tokenizations = distinct_tokenizations(tokenizations);

      std::vector<Answer> prob_answers;
      for (int p = 0; p < m; ++p)
        prob_answers.push_back(generate_path(Condition::kProbabilistic, p + 1,
                                             tokenizations[p].ids,
                                             DecodeMode::kGreedy));
      const Answer prob_majority = majority_vote(prob_answers);
      out.prob_majority_correct = prob_majority && *prob_majority == gold;
      out.prob_oracle = oracle_hit(prob_answers, item.gold_answer);
      out.distinct_answers_prob = detail::count_distinct(prob_answers);

      // A condition that produced nothing at all makes the comparison
      // meaningless; exclude the item but keep it in the report.
      if (condition_failures[0] > 0 || condition_failures[1] >= m ||
          condition_failures[2] >= m) {
        out.failed = true;
        out.fail_reason = "backend failure left a condition with no paths";
      }
    } catch (const DataError& e) {
      out.failed = true;
      out.fail_reason = e.what();
    }
  });

  EvalReport report;
  report.items_total = static_cast<int>(items.size());
  int evaluated = 0;
  int base_hits = 0, cot_major = 0, cot_oracle = 0, prob_major = 0,
      prob_oracle = 0;
  double sum_tok = 0, sum_ans_cot = 0, sum_ans_prob = 0;
  for (const auto& slot : slots) {
    report.failed_paths += slot.failed_paths;
    report.logs.insert(report.logs.end(), slot.logs.begin(), slot.logs.end());
    if (slot.failed) {
      ++report.items_failed;
      continue;
    }
    ++evaluated;
    base_hits += slot.baseline_correct;
    cot_major += slot.cot_majority_correct;
    cot_oracle += slot.cot_oracle;
    prob_major += slot.prob_majority_correct;
    prob_oracle += slot.prob_oracle;
    sum_tok += static_cast<double>(slot.distinct_tokenizations);
    sum_ans_cot += static_cast<double>(slot.distinct_answers_cot);
    sum_ans_prob += static_cast<double>(slot.distinct_answers_prob);
  }
  report.items_evaluated = evaluated;
  if (evaluated > 0) {
    const double denom = static_cast<double>(evaluated);
    report.baseline = 100.0 * base_hits / denom;
    report.cot_sc_majority = 100.0 * cot_major / denom;
    report.cot_sc_oracle = 100.0 * cot_oracle / denom;
    report.prob_majority = 100.0 * prob_major / denom;
    report.prob_oracle = 100.0 * prob_oracle / denom;
    report.avg_distinct_tokenizations = sum_tok / denom;
    report.avg_distinct_answers_cot_sc = sum_ans_cot / denom;
    report.avg_distinct_answers_prob = sum_ans_prob / denom;
    if (report.baseline > 0.0) {
      const auto delta = [&](double acc) {
        return (acc - report.baseline) / report.baseline * 100.0;
      };
      report.delta_cot_sc_majority = delta(report.cot_sc_majority);
      report.delta_cot_sc_oracle = delta(report.cot_sc_oracle);
      report.delta_prob_majority = delta(report.prob_majority);
      report.delta_prob_oracle = delta(report.prob_oracle);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const EvalReport& r) {
  const auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json logs = nlohmann::json::array();
  for (const PathLog& log : r.logs) {
    logs.push_back({{"item_id", log.item_id},
                    {"condition", log.condition},
                    {"path_index", log.path_index},
                    {"prompt_token_ids", log.prompt_token_ids},
                    {"text", log.text},
                    {"answer", log.answer ? nlohmann::json(*log.answer)
                                          : nlohmann::json(nullptr)},
                    {"failed", log.failed}});
  }
  return nlohmann::json{
      {"items",
       {{"total", r.items_total},
        {"evaluated", r.items_evaluated},
        {"failed", r.items_failed}}},
      {"failed_paths", r.failed_paths},
      {"accuracy",
       {{"baseline", r.baseline},
        {"cot_sc_majority", r.cot_sc_majority},
        {"cot_sc_oracle", r.cot_sc_oracle},
        {"probabilistic_majority", r.prob_majority},
        {"probabilistic_oracle", r.prob_oracle}}},
      {"delta_vs_baseline_pct",
       {{"cot_sc_majority", opt(r.delta_cot_sc_majority)},
        {"cot_sc_oracle", opt(r.delta_cot_sc_oracle)},
        {"probabilistic_majority", opt(r.delta_prob_majority)},
        {"probabilistic_oracle", opt(r.delta_prob_oracle)}}},
      {"diversity",
       {{"avg_distinct_tokenizations", r.avg_distinct_tokenizations},
        {"avg_distinct_answers_cot_sc", r.avg_distinct_answers_cot_sc},
        {"avg_distinct_answers_probabilistic", r.avg_distinct_answers_prob}}},
      {"logs", logs}};
}

// Human-readable table mirroring the five-condition column layout.
inline std::string format_report_table(const EvalReport& r) {
  char buf[160];
  std::string out;
  out += "condition                 accuracy    vs baseline\n";
  const auto row = [&](const char* name, double acc,
                       const std::optional<double>& delta) {
    if (delta)
      std::snprintf(buf, sizeof(buf), "%-24s %8.2f%%      %+8.2f%%\n", name,
                    acc, *delta);
    else
      std::snprintf(buf, sizeof(buf), "%-24s %8.2f%%            --\n", name,
                    acc);
    out += buf;
  };
  row("Baseline", r.baseline, std::nullopt);
  row("CoT + SC Majority", r.cot_sc_majority, r.delta_cot_sc_majority);
  row("CoT + SC Oracle", r.cot_sc_oracle, r.delta_cot_sc_oracle);
  row("Probabilistic Majority", r.prob_majority, r.delta_prob_majority);
  row("Probabilistic Oracle", r.prob_oracle, r.delta_prob_oracle);
  std::snprintf(buf, sizeof(buf),
                "\nitems: %d evaluated, %d failed (of %d); failed paths: %d\n",
                r.items_evaluated, r.items_failed, r.items_total,
                r.failed_paths);
  out += buf;
  std::snprintf(buf, sizeof(buf),
                "diversity per item: %.2f distinct tokenizations; "
                "%.2f / %.2f distinct answers (CoT+SC / probabilistic)\n",
                r.avg_distinct_tokenizations, r.avg_distinct_answers_cot_sc,
                r.avg_distinct_answers_prob);
  out += buf;
  return out;
}

}  // namespace stochtok
