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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stochtok/backend_http.hpp"
#include "stochtok/stochtok.hpp"

namespace {

using namespace stochtok;

// Exit codes: 0 success, 1 usage error, 2 data/format error,
// 3 backend/transport error.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitBackend = 3;

struct VocabArgs {
  std::string path;
  std::string boundary_marker;  // empty = keep file metadata

  Vocabulary load() const {
    LoadOptions options;
    if (!boundary_marker.empty()) options.boundary_marker = boundary_marker;
    return load_vocab(path, options);
  }
};

void add_vocab_options(CLI::App* cmd, VocabArgs& args) {
  cmd->add_option("--vocab", args.path, "vocabulary JSON file")->required();
  cmd->add_option("--boundary-marker", args.boundary_marker,
                  "override the word-boundary marker from the file");
}

struct SampleArgs {
  int m = 64;
  std::string mode = "exact";
  int l = 0;
  double alpha = 1.0;
  uint64_t seed = 0;

  SampleConfig config() const {
    SampleConfig cfg;
    cfg.m = m;
    if (mode == "exact")
      cfg.mode = SampleConfig::Mode::kExact;
    else if (mode == "lbest")
      cfg.mode = SampleConfig::Mode::kLBest;
    else
      throw CLI::ValidationError("--mode", "expected 'exact' or 'lbest'");
    cfg.l = l;
    cfg.alpha = alpha;
    cfg.seed = seed;
    return cfg;
  }
};

void add_sample_options(CLI::App* cmd, SampleArgs& args) {
  cmd->add_option("--m", args.m, "number of tokenizations to sample")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--mode", args.mode, "exact | lbest")
      ->check(CLI::IsMember({"exact", "lbest"}));
  cmd->add_option("--l", args.l,
                  "lbest candidate count (default m*m when omitted)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--alpha", args.alpha, "lbest smoothing exponent")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--seed", args.seed, "RNG seed");
}

void print_tokenization_line(std::ostream& out, const Vocabulary& v,
                             const Tokenization& t) {
  out << format_double(t.log_prob) << '\t';
  for (size_t i = 0; i < t.ids.size(); ++i) {
    if (i > 0) out << ' ';
    out << t.ids[i];
  }
  out << '\t' << decode(v, t) << '\n';
}

DocStream open_corpus(const std::string& path, const std::string& format) {
  if (std::filesystem::is_directory(path)) return stream_text_directory(path);
  if (format == "ids") return stream_id_file(path);
  return stream_text_file(path);
}

int cmd_estimate(const VocabArgs& vocab_args, const std::string& corpus_path,
                 const std::string& corpus_format, const std::string& out_path,
                 const std::string& method, int iters, double tol, int jobs) {
  const Vocabulary vocab = vocab_args.load();

  CountTable counts;
  if (corpus_format == "counts") {
    counts = load_count_table(corpus_path, vocab);
  } else {
    counts = count_corpus(open_corpus(corpus_path, corpus_format), vocab, jobs);
  }
  if (counts.total == 0) throw DataError("corpus produced zero tokens");

  UnigramModel model = estimate_counting(counts, vocab);
  if (method == "em") {
    if (corpus_format == "counts")
      throw DataError("EM estimation needs documents, not a count file");
    std::vector<Doc> docs;
    DocStream stream = open_corpus(corpus_path, corpus_format);
    while (auto doc = stream()) docs.push_back(std::move(*doc));
    EmConfig cfg;
    cfg.max_iterations = iters;
    cfg.tolerance = tol;
    cfg.jobs = jobs;
    auto [em_model, state] = estimate_em(docs, vocab, model, cfg);
    model = std::move(em_model);
    std::cerr << "em: " << state.iterations << " iterations";
    if (!state.log_likelihood_trace.empty())
      std::cerr << ", final log-likelihood "
                << format_double(state.log_likelihood_trace.back());
    std::cerr << '\n';
  } else if (method != "counting") {
    throw CLI::ValidationError("--method", "expected 'counting' or 'em'");
  }

  save_model(model, vocab, out_path);

  size_t counted = 0;
  for (const auto& [id, n] : counts.counts) counted += n > 0;
  std::cerr << "total tokens N=" << counts.total << "; " << counted << " of "
            << vocab.size() << " vocabulary tokens observed ("
            << (vocab.size() ? 100.0 * counted / vocab.size() : 0.0)
            << "% coverage)\n";
  std::cerr << "model written to " << out_path << '\n';
  return kExitOk;
}

int cmd_encode(const VocabArgs& vocab_args, const std::string& text) {
  const Vocabulary vocab = vocab_args.load();
  const auto ids = bpe_encode(vocab, text);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) std::cout << ' ';
    std::cout << ids[i];
  }
  std::cout << '\n';
  return kExitOk;
}

int cmd_decode(const VocabArgs& vocab_args, const std::vector<int32_t>& ids) {
  const Vocabulary vocab = vocab_args.load();
  std::cout << decode(vocab, ids) << '\n';
  return kExitOk;
}

int cmd_sample(const VocabArgs& vocab_args, const std::string& model_path,
               const SampleArgs& sample_args, const std::string& text) {
  const Vocabulary vocab = vocab_args.load();
  const UnigramModel model = load_model(model_path, &vocab);
  const auto samples = sample_m(model, vocab, text, sample_args.config());
  for (const auto& t : samples) print_tokenization_line(std::cout, vocab, t);
  std::cerr << "distinct tokenizations: " << distinct_tokenizations(samples)
            << " of " << samples.size() << '\n';
  return kExitOk;
}

int cmd_kbest(const VocabArgs& vocab_args, const std::string& model_path,
              int k, const std::string& text) {
  const Vocabulary vocab = vocab_args.load();
  const UnigramModel model = load_model(model_path, &vocab);
  const Lattice lat = build_lattice(model, vocab, text);
  for (const auto& t : kbest(lat, static_cast<size_t>(k)))
    print_tokenization_line(std::cout, vocab, t);
  return kExitOk;
}

int cmd_dump_lattice(const VocabArgs& vocab_args,
                     const std::string& model_path, const std::string& text) {
  const Vocabulary vocab = vocab_args.load();
  const UnigramModel model = load_model(model_path, &vocab);
  dump_lattice(build_lattice(model, vocab, text), std::cout);
  return kExitOk;
}

int cmd_eval(const VocabArgs& vocab_args, const std::string& model_path,
             const std::string& items_path, const std::string& backend_url,
             const std::string& mock_script, const SampleArgs& sample_args,
             double temperature, int top_k, int max_new_tokens,
             const std::string& marker, const std::string& report_json_path,
             const std::string& report_table_path, int jobs) {
  const Vocabulary vocab = vocab_args.load();
  const UnigramModel model = load_model(model_path, &vocab);
  const std::vector<TaskItem> items = load_items(items_path);

  std::unique_ptr<Backend> backend;
  if (!mock_script.empty())
    backend = std::make_unique<MockBackend>(load_mock_script(mock_script));
  else if (!backend_url.empty())
    backend = std::make_unique<HttpBackend>(backend_url);
  else
    throw CLI::ValidationError(
        "--backend-url", "one of --backend-url or --mock-script is required");

  EvalConfig cfg;
  cfg.sample = sample_args.config();
  cfg.sc_temperature = temperature;
  cfg.sc_top_k = top_k;
  cfg.max_new_tokens = max_new_tokens;
  cfg.answer_marker = marker;
  cfg.jobs = jobs;

  const EvalReport report = run_eval(items, model, vocab, *backend, cfg);

  {
    std::ofstream out(report_json_path, std::ios::binary);
    if (!out) throw DataError("cannot write report: " + report_json_path);
    // backend text is arbitrary; replace any invalid UTF-8 instead of failing
    out << report_to_json(report).dump(
               2, ' ', false, nlohmann::json::error_handler_t::replace)
        << '\n';
  }
  const std::string table = format_report_table(report);
  if (!report_table_path.empty()) {
    std::ofstream out(report_table_path, std::ios::binary);
    if (!out) throw DataError("cannot write report: " + report_table_path);
    out << table;
  }
  std::cout << table;
  std::cerr << "report written to " << report_json_path << '\n';

  if (report.items_failed > 0 || report.failed_paths > 0) {
    std::cerr << report.items_failed << " items / " << report.failed_paths
              << " paths failed to complete\n";
    return kExitBackend;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "stochtok: probabilistic tokenization sampling and self-consistency "
      "evaluation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file, overridden by flags");

  std::function<int()> run;

  {
    auto* cmd = app.add_subcommand(
        "estimate", "estimate unigram probabilities from a corpus");
    auto vocab_args = std::make_shared<VocabArgs>();
    add_vocab_options(cmd, *vocab_args);
    auto corpus = std::make_shared<std::string>();
    auto format = std::make_shared<std::string>("text");
    auto out = std::make_shared<std::string>();
    auto method = std::make_shared<std::string>("counting");
    auto iters = std::make_shared<int>(50);
    auto tol = std::make_shared<double>(1e-6);
    auto jobs = std::make_shared<int>(1);
    cmd->add_option("--corpus", *corpus,
                    "corpus file or directory (one document per line)")
        ->required();
    cmd->add_option("--corpus-format", *format, "text | ids | counts")
        ->check(CLI::IsMember({"text", "ids", "counts"}));
    cmd->add_option("--out", *out, "output model TSV")->required();
    cmd->add_option("--method", *method, "counting | em")
        ->check(CLI::IsMember({"counting", "em"}));
    cmd->add_option("--iters", *iters, "EM iteration cap")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--tol", *tol, "EM relative improvement tolerance")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--jobs", *jobs, "worker thread count")
        ->check(CLI::PositiveNumber);
    cmd->callback([=, &run] {
      run = [=] {
        return cmd_estimate(*vocab_args, *corpus, *format, *out, *method,
                            *iters, *tol, *jobs);
      };
    });
  }

  {
    auto* cmd = app.add_subcommand("encode", "canonical BPE encode text");
    auto vocab_args = std::make_shared<VocabArgs>();
    add_vocab_options(cmd, *vocab_args);
    auto text = std::make_shared<std::string>();
    cmd->add_option("text", *text, "input text")->required();
    cmd->callback(
        [=, &run] { run = [=] { return cmd_encode(*vocab_args, *text); }; });
  }

  {
    auto* cmd = app.add_subcommand("decode", "decode token ids to text");
    auto vocab_args = std::make_shared<VocabArgs>();
    add_vocab_options(cmd, *vocab_args);
    auto ids = std::make_shared<std::vector<int32_t>>();
    cmd->add_option("ids", *ids, "token ids")->required();
    cmd->callback(
        [=, &run] { run = [=] { return cmd_decode(*vocab_args, *ids); }; });
  }

  {
    auto* cmd =
        app.add_subcommand("sample", "sample m tokenizations of the input");
    auto vocab_args = std::make_shared<VocabArgs>();
    add_vocab_options(cmd, *vocab_args);
    auto model = std::make_shared<std::string>();
    auto sample_args = std::make_shared<SampleArgs>();
    auto text = std::make_shared<std::string>();
    cmd->add_option("--model", *model, "unigram model TSV")->required();
    add_sample_options(cmd, *sample_args);
    cmd->add_option("text", *text, "input text")->required();
    cmd->callback([=, &run] {
      run = [=] {
        return cmd_sample(*vocab_args, *model, *sample_args, *text);
      };
    });
  }

  {
    auto* cmd = app.add_subcommand(
        "kbest", "exact k-best tokenizations of the input");
    auto vocab_args = std::make_shared<VocabArgs>();
    add_vocab_options(cmd, *vocab_args);
    auto model = std::make_shared<std::string>();
    auto k = std::make_shared<int>(10);
    auto text = std::make_shared<std::string>();
    cmd->add_option("--model", *model, "unigram model TSV")->required();
    cmd->add_option("--k", *k, "number of tokenizations")
        ->check(CLI::PositiveNumber);
    cmd->add_option("text", *text, "input text")->required();
    cmd->callback([=, &run] {
      run = [=] { return cmd_kbest(*vocab_args, *model, *k, *text); };
    });
  }

  {
    auto* cmd = app.add_subcommand("dump-lattice",
                                   "debug dump: one lattice edge per line");
    auto vocab_args = std::make_shared<VocabArgs>();
    add_vocab_options(cmd, *vocab_args);
    auto model = std::make_shared<std::string>();
    auto text = std::make_shared<std::string>();
    cmd->add_option("--model", *model, "unigram model TSV")->required();
    cmd->add_option("text", *text, "input text")->required();
    cmd->callback([=, &run] {
      run = [=] { return cmd_dump_lattice(*vocab_args, *model, *text); };
    });
  }

  {
    auto* cmd = app.add_subcommand(
        "eval", "run the three-condition self-consistency evaluation");
    auto vocab_args = std::make_shared<VocabArgs>();
    add_vocab_options(cmd, *vocab_args);
    auto model = std::make_shared<std::string>();
    auto items = std::make_shared<std::string>();
    auto backend_url = std::make_shared<std::string>();
    auto mock_script = std::make_shared<std::string>();
    auto sample_args = std::make_shared<SampleArgs>();
    auto temperature = std::make_shared<double>(0.2);
    auto top_k = std::make_shared<int>(64);
    auto max_new = std::make_shared<int>(256);
    auto marker =
        std::make_shared<std::string>(std::string(kDefaultAnswerMarker));
    auto report_json = std::make_shared<std::string>("eval_report.json");
    auto report_table = std::make_shared<std::string>();
    auto jobs = std::make_shared<int>(1);
    cmd->add_option("--model", *model, "unigram model TSV")->required();
    cmd->add_option("--items", *items, "task items JSONL")->required();
    cmd->add_option("--backend-url", *backend_url,
                    "generation server base URL");
    cmd->add_option("--mock-script", *mock_script,
                    "scripted mock backend JSON (instead of a server)");
    add_sample_options(cmd, *sample_args);
    cmd->add_option("--temperature", *temperature,
                    "CoT+SC sampling temperature")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--top-k", *top_k, "CoT+SC top-k")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--max-new-tokens", *max_new, "generation length cap")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--marker", *marker, "answer marker pattern");
    cmd->add_option("--report-json", *report_json, "report JSON path");
    cmd->add_option("--report-table", *report_table,
                    "also write the table here");
    cmd->add_option("--jobs", *jobs, "concurrent item limit")
        ->check(CLI::PositiveNumber);
    cmd->callback([=, &run] {
      run = [=] {
        return cmd_eval(*vocab_args, *model, *items, *backend_url,
                        *mock_script, *sample_args, *temperature, *top_k,
                        *max_new, *marker, *report_json, *report_table, *jobs);
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    return run();
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
    return kExitBackend;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
}
