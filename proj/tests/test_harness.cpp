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

#include "stochtok/harness.hpp"

#include <algorithm>
#include <doctest.h>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stochtok/backend_http.hpp"
#include "test_support.hpp"

using namespace stochtok;

TEST_CASE("extract_answer finds the last marker and normalizes") {
  CHECK(extract_answer("...So she makes $270 - $180 = $90 profit. "
                       "The answer is $90.") == Answer("90"));
  CHECK(extract_answer("...1.5 x 180 = 270. The answer is $270.") ==
        Answer("270"));
  CHECK(extract_answer("no conclusion reached") == Answer());
  // last occurrence wins
  CHECK(extract_answer("The answer is 1. Wait. The answer is 2.") ==
        Answer("2"));
  // next line is not part of the answer
  CHECK(extract_answer("The answer is 7.\nUnrelated epilogue.") ==
        Answer("7"));
  // marker with nothing usable after it
  CHECK(extract_answer("The answer is   ") == Answer());
  CHECK(extract_answer("The result is 5", "The result is") == Answer("5"));
}

TEST_CASE("answer normalization") {
  CHECK(normalize_answer(" $1,234.  ") == "1234");
  CHECK(normalize_answer("3.5") == "3.5");
  CHECK(normalize_answer("3.5.") == "3.5");
  CHECK(normalize_answer("  c  ") == "C");  // multiple-choice letter
  CHECK(normalize_answer("cat") == "cat");
  CHECK(normalize_answer("\xe2\x82\xac"
                         "42") == "42");
  CHECK(normalize_answer("-90") == "-90");
  CHECK(normalize_answer("$$5") == "5");
}

TEST_CASE("majority_vote picks the most frequent present answer") {
  CHECK(majority_vote({Answer("90"), Answer("270"), Answer("90")}) ==
        Answer("90"));
  // tie: earliest first occurrence wins
  CHECK(majority_vote({Answer("1"), Answer("2")}) == Answer("1"));
  CHECK(majority_vote({Answer(), Answer()}) == Answer());
  // absent entries never win even when they dominate
  CHECK(majority_vote({Answer(), Answer(), Answer("7")}) == Answer("7"));
  CHECK_THROWS_AS(majority_vote({}), DataError);
}

TEST_CASE("majority_vote is permutation invariant under a strict majority") {
  std::vector<Answer> answers = {Answer("a"), Answer("b"), Answer("a"),
                                 Answer(), Answer("a"), Answer("b")};
  std::sort(answers.begin(), answers.end());
  do {
    CHECK(majority_vote(answers) == Answer("a"));
  } while (std::next_permutation(answers.begin(), answers.end()));
}

TEST_CASE("oracle_hit matches any present answer against gold") {
  CHECK(oracle_hit({Answer("270"), Answer("90")}, "90"));
  CHECK_FALSE(oracle_hit({}, "90"));
  CHECK_FALSE(oracle_hit({Answer("89")}, "90"));
  CHECK(oracle_hit({Answer("90")}, "$90."));  // gold is normalized too
  CHECK_FALSE(oracle_hit({Answer()}, "90"));
}

TEST_CASE("mock backend follows its script deterministically") {
  MockBackend mock;
  mock.add_rule({std::vector<int32_t>{0, 1}, std::nullopt, std::nullopt,
                 "The answer is 90."});
  mock.set_default("I cannot say.");

  GenerateRequest req;
  req.prompt_token_ids = {0, 1};
  CHECK(mock.generate(req).text == "The answer is 90.");
  CHECK(mock.generate(req).text == "The answer is 90.");  // determinism
  req.prompt_token_ids = {1, 0};
  CHECK(mock.generate(req).text == "I cannot say.");

  MockBackend strict;
  CHECK_THROWS_AS(strict.generate(req), BackendError);
}

TEST_CASE("mock rules can pin mode and seed") {
  MockBackend mock;
  mock.add_rule({std::nullopt, DecodeMode::kSample, uint64_t{7}, "seven"});
  mock.add_rule({std::nullopt, DecodeMode::kSample, std::nullopt, "sampled"});
  mock.set_default("greedy");
  GenerateRequest req;
  req.mode = DecodeMode::kSample;
  req.seed = 7;
  CHECK(mock.generate(req).text == "seven");
  req.seed = 8;
  CHECK(mock.generate(req).text == "sampled");
  req.mode = DecodeMode::kGreedy;
  CHECK(mock.generate(req).text == "greedy");
}

TEST_CASE("mock script files parse into backends") {
  const auto j = nlohmann::json::parse(R"({
    "default": "dunno",
    "rules": [
      {"ids": [1, 2], "mode": "greedy", "text": "The answer is 4."},
      {"seed": 99, "text": "The answer is 5."}
    ]
  })");
  MockBackend mock = parse_mock_script(j);
  GenerateRequest req;
  req.prompt_token_ids = {1, 2};
  CHECK(mock.generate(req).text == "The answer is 4.");
  req.prompt_token_ids = {3};
  req.seed = 99;
  CHECK(mock.generate(req).text == "The answer is 5.");
  req.seed = 0;
  CHECK(mock.generate(req).text == "dunno");
}

TEST_CASE("http backend speaks the wire protocol") {
  httplib::Server server;
  nlohmann::json seen_request;
  server.Post("/generate",
              [&](const httplib::Request& req, httplib::Response& res) {
                seen_request = nlohmann::json::parse(req.body);
                if (seen_request.at("prompt_token_ids").empty()) {
                  res.set_content("this is not json", "text/plain");
                  return;
                }
                const nlohmann::json reply = {{"text", "The answer is 11."},
                                              {"token_ids", {5, 6}}};
                res.set_content(reply.dump(), "application/json");
              });
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread server_thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpBackend backend("http://127.0.0.1:" + std::to_string(port));
  GenerateRequest req;
  req.prompt_token_ids = {3, 4, 5};
  req.max_new_tokens = 128;
  req.mode = DecodeMode::kSample;
  req.temperature = 0.2;
  req.top_k = 64;
  req.seed = 1234;

  const GenerateResult result = backend.generate(req);
  CHECK(result.text == "The answer is 11.");
  CHECK(result.token_ids == std::vector<int32_t>{5, 6});

  // exact request schema
  CHECK(seen_request.at("prompt_token_ids") ==
        nlohmann::json(std::vector<int32_t>{3, 4, 5}));
  CHECK(seen_request.at("max_new_tokens") == 128);
  CHECK(seen_request.at("mode") == "sample");
  CHECK(seen_request.at("temperature").get<double>() == doctest::Approx(0.2));
  CHECK(seen_request.at("top_k") == 64);
  CHECK(seen_request.at("seed") == 1234);

  // malformed payload surfaces as a transport error
  req.prompt_token_ids = {};
  CHECK_THROWS_AS(backend.generate(req), BackendError);

  server.stop();
  server_thread.join();

  HttpBackend dead("http://127.0.0.1:1", 1);
  CHECK_THROWS_AS(dead.generate(req), BackendError);
}

namespace {

// Backend that fails transport for exactly one derived seed.
class FlakyBackend : public Backend {
 public:
  FlakyBackend(Backend& inner, uint64_t poison_seed)
      : inner_(inner), poison_(poison_seed) {}
  GenerateResult generate(const GenerateRequest& req) override {
    if (req.seed == poison_) throw BackendError("injected failure");
    return inner_.generate(req);
  }

 private:
  Backend& inner_;
  uint64_t poison_;
};

}  // namespace

TEST_CASE("run_eval with m=1 makes majority equal oracle per condition") {
  const auto v = testsupport::toy_vocab();
  const auto m = testsupport::toy_model();
  std::vector<TaskItem> items = {{"i1", "abab", "42", "{question}"},
                                 {"i2", "ababab", "7", "{question}"}};
  MockBackend mock;
  mock.set_default("The answer is 42.");
  EvalConfig cfg;
  cfg.sample.m = 1;
  const EvalReport report = run_eval(items, m, v, mock, cfg);
  CHECK(report.items_evaluated == 2);
  CHECK(report.baseline == doctest::Approx(50.0));
  CHECK(report.cot_sc_majority == report.cot_sc_oracle);
  CHECK(report.prob_majority == report.prob_oracle);
  CHECK(report.cot_sc_majority == doctest::Approx(50.0));
}

TEST_CASE("run_eval rejects an empty item list") {
  const auto v = testsupport::toy_vocab();
  const auto m = testsupport::toy_model();
  MockBackend mock;
  mock.set_default("x");
  EvalConfig cfg;
  CHECK_THROWS_AS(run_eval({}, m, v, mock, cfg), DataError);
}

TEST_CASE("run_eval validates templates and gold answers") {
  const auto v = testsupport::toy_vocab();
  const auto m = testsupport::toy_model();
  MockBackend mock;
  mock.set_default("x");
  EvalConfig cfg;
  std::vector<TaskItem> items = {{"bad", "ab", "1", "no slot here"}};
  CHECK_THROWS_AS(run_eval(items, m, v, mock, cfg), DataError);
  items = {{"bad2", "ab", "", "{question}"}};
  CHECK_THROWS_AS(run_eval(items, m, v, mock, cfg), DataError);
}

TEST_CASE("a failed generation degrades to an absent answer") {
  const auto v = testsupport::toy_vocab();
  const auto m = testsupport::toy_model();
  std::vector<TaskItem> items = {{"i1", "abab", "42", "{question}"}};
  MockBackend inner;
  inner.set_default("The answer is 42.");
  // poison one of the three CoT+SC paths
  const uint64_t poison = derive_path_seed(0, 0, Condition::kCotSc, 1);
  FlakyBackend flaky(inner, poison);
  EvalConfig cfg;
  cfg.sample.m = 3;
  cfg.sample.seed = 0;
  const EvalReport report = run_eval(items, m, v, flaky, cfg);
  CHECK(report.items_evaluated == 1);
  CHECK(report.items_failed == 0);
  CHECK(report.failed_paths == 1);
  // majority over {absent, 42, 42} still lands on 42
  CHECK(report.cot_sc_majority == doctest::Approx(100.0));
  bool saw_failed_log = false;
  for (const auto& log : report.logs)
    saw_failed_log =
        saw_failed_log || (log.failed && log.condition == "cot_sc");
  CHECK(saw_failed_log);
}

TEST_CASE("an item whose whole condition fails is excluded but counted") {
  const auto v = testsupport::toy_vocab();
  const auto m = testsupport::toy_model();
  std::vector<TaskItem> items = {{"i1", "abab", "42", "{question}"},
                                 {"i2", "ababab", "42", "{question}"}};
  MockBackend inner;
  inner.set_default("The answer is 42.");
  // poison item 0's single baseline path
  const uint64_t poison = derive_path_seed(0, 0, Condition::kBaseline, 0);
  FlakyBackend flaky(inner, poison);
  EvalConfig cfg;
  cfg.sample.m = 2;
  const EvalReport report = run_eval(items, m, v, flaky, cfg);
  CHECK(report.items_failed == 1);
  CHECK(report.items_evaluated == 1);
  CHECK(report.baseline == doctest::Approx(100.0));
}

TEST_CASE("zero-mass prompts mark the item failed") {
  const auto v = testsupport::toy_vocab();
  const auto m = testsupport::toy_model();
  std::vector<TaskItem> items = {{"i1", "abab", "42", "{question}"},
                                 {"zz", "zzz", "42", "{question}"}};
  MockBackend mock;
  mock.set_default("The answer is 42.");
  EvalConfig cfg;
  cfg.sample.m = 2;
  const EvalReport report = run_eval(items, m, v, mock, cfg);
  CHECK(report.items_failed == 1);
  CHECK(report.items_evaluated == 1);
}

TEST_CASE("load_items parses JSON lines and validates") {
  std::istringstream in(
      R"({"id": "q1", "question": "Q?", "gold_answer": "90", "template": "Solve: {question}"})"
      "\n"
      R"({"id": 7, "question": "R?", "gold_answer": "A", "template": "{question}"})"
      "\n");
  const auto items = load_items(in);
  REQUIRE(items.size() == 2);
  CHECK(items[0].id == "q1");
  CHECK(items[1].id == "7");
  CHECK(render_prompt(items[0]) == "Solve: Q?");

  std::istringstream bad(R"({"id": "x", "question": "Q"})"
                         "\n");
  CHECK_THROWS_AS(load_items(bad), DataError);
  std::istringstream bad2(
      R"({"id": "x", "question": "Q", "gold_answer": "", "template": "{question}"})"
      "\n");
  CHECK_THROWS_AS(load_items(bad2), DataError);
}

// ---------------------------------------------------------------------------
// The scripted four-item protocol check
// ---------------------------------------------------------------------------

TEST_CASE("run_eval reproduces the hand-computed four-item report") {
  const auto v = testsupport::toy_vocab();
  const auto m = testsupport::toy_model();
  auto scripted = testsupport::make_scripted_eval(m, v);

  const EvalReport report =
      run_eval(scripted.items, m, v, scripted.mock, scripted.cfg);

  CHECK(report.items_total == 4);
  CHECK(report.items_evaluated == 4);
  CHECK(report.items_failed == 0);
  CHECK(report.failed_paths == 0);

  // hand-computed vote tables
  CHECK(report.baseline == doctest::Approx(50.0).epsilon(1e-9));
  CHECK(report.prob_majority == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(report.cot_sc_majority == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(report.cot_sc_oracle == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(report.prob_oracle == doctest::Approx(100.0).epsilon(1e-9));

  // oracle >= majority in every condition
  CHECK(report.cot_sc_oracle >= report.cot_sc_majority);
  CHECK(report.prob_oracle >= report.prob_majority);

  // deltas recompute from the absolute accuracies to within 0.01pp
  REQUIRE(report.delta_prob_majority.has_value());
  CHECK(*report.delta_prob_majority ==
        doctest::Approx((100.0 - 50.0) / 50.0 * 100.0).epsilon(1e-6));
  CHECK(*report.delta_cot_sc_majority == doctest::Approx(-100.0).epsilon(1e-6));
  CHECK(*report.delta_cot_sc_oracle == doctest::Approx(100.0).epsilon(1e-6));
  CHECK(*report.delta_prob_oracle == doctest::Approx(100.0).epsilon(1e-6));

  // diversity: 3 distinct tokenizations per item, 2 distinct answers per
  // item in both sampled conditions
  CHECK(report.avg_distinct_tokenizations == doctest::Approx(3.0));
  CHECK(report.avg_distinct_answers_cot_sc == doctest::Approx(2.0));
  CHECK(report.avg_distinct_answers_prob == doctest::Approx(2.0));

  // reruns are bit-identical, including path logs
  const EvalReport again =
      run_eval(scripted.items, m, v, scripted.mock, scripted.cfg);
  CHECK(report_to_json(report).dump() == report_to_json(again).dump());

  // thread count must not change anything either
  auto parallel_cfg = scripted.cfg;
  parallel_cfg.jobs = 4;
  const EvalReport parallel =
      run_eval(scripted.items, m, v, scripted.mock, parallel_cfg);
  CHECK(report_to_json(report).dump() == report_to_json(parallel).dump());

  const std::string table = format_report_table(report);
  CHECK(table.find("Baseline") != std::string::npos);
  CHECK(table.find("Probabilistic Oracle") != std::string::npos);
}
