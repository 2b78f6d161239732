// lmens: command-line front end for building, scoring, mixing and analysing
// per-token probability streams.
//
// Exit codes: 0 success, 1 validation failure, 2 usage error, 3 I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lmens/detail/files.hpp"
#include "lmens/lmens.hpp"

namespace {

namespace fs = std::filesystem;
using lmens::detail::format_fixed;
using lmens::detail::format_g17;

enum ExitCode : int { kOk = 0, kValidation = 1, kUsage = 2, kIo = 3 };

std::size_t default_threads() {
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Re-throws a library error with the offending file named in the message.
template <class Fn>
auto in_file(const std::string& path, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const lmens::FormatError& e) {
    throw lmens::FormatError(path + ": " + e.what());
  } catch (const lmens::ValidationError& e) {
    throw lmens::ValidationError(path + ": " + e.what());
  } catch (const lmens::UsageError& e) {
    throw lmens::UsageError(path + ": " + e.what());
  }
}

std::string split_from_path(const std::string& path) { return fs::path(path).stem().string(); }

std::shared_ptr<const lmens::Vocabulary> read_vocab(const std::string& path) {
  auto text = lmens::detail::read_file(path);
  return in_file(path, [&] {
    return std::make_shared<const lmens::Vocabulary>(lmens::Vocabulary::from_file(text));
  });
}

lmens::Corpus read_corpus(const std::string& path, std::shared_ptr<const lmens::Vocabulary> vocab,
                          const std::string& split) {
  auto text = lmens::detail::read_file(path);
  return in_file(path, [&] {
    return lmens::load_corpus(text, std::move(vocab), split.empty() ? split_from_path(path) : split);
  });
}

lmens::ProbStream read_stream_file(const std::string& path) {
  auto bytes = lmens::detail::read_file(path);
  return in_file(path, [&] { return lmens::read_stream(bytes); });
}

std::vector<lmens::ProbStream> read_streams(const std::vector<std::string>& paths) {
  std::vector<lmens::ProbStream> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(read_stream_file(p));
  return out;
}

void write_output(const std::string& path, const std::string& bytes) {
  lmens::detail::write_file_atomic(path, bytes);
}

struct FitFlags {
  lmens::FitConfig config;

  void attach(CLI::App* cmd) {
    cmd->add_option("--max_iterations", config.max_iterations, "Iteration cap for gradient descent")
        ->capture_default_str();
    cmd->add_option("--tol", config.tol, "Stop when |dH| between accepted steps is below this")
        ->capture_default_str();
    cmd->add_option("--armijo_c", config.armijo_c, "Armijo sufficient-decrease constant")
        ->capture_default_str();
    cmd->add_option("--initial_step", config.initial_step, "First trial step of the line search")
        ->capture_default_str();
    cmd->add_option("--boundary_epsilon", config.boundary_epsilon,
                    "Stop once the largest weight exceeds 1 - epsilon")
        ->capture_default_str();
  }
};

std::string describe_weights(const lmens::EnsembleWeights& w) {
  std::string out;
  for (std::size_t j = 0; j < w.size(); ++j) {
    out += "  " + w.model_names()[j] + " " + format_fixed(w.weights()[j], 6) + "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble language models from published per-token probability streams"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = default_threads();
  app.add_option("--threads", threads, "Worker cap (results do not depend on it)")
      ->check(CLI::PositiveNumber);

  // vocab
  auto* vocab_cmd = app.add_subcommand("vocab", "Build a vocabulary file from training text");
  std::string vocab_train, vocab_out;
  std::optional<std::size_t> vocab_max;
  std::size_t vocab_min = 0;
  vocab_cmd->add_option("--train", vocab_train, "Training text")->required();
  vocab_cmd->add_option("--out", vocab_out, "Vocabulary file to write")->required();
  vocab_cmd->add_option("--max-size", vocab_max, "Keep at most this many tokens (before <unk>/</s>)");
  vocab_cmd->add_option("--min-count", vocab_min, "Drop tokens seen fewer times")->capture_default_str();

  // checksum
  auto* sum_cmd = app.add_subcommand("checksum", "Print token count and checksum of a split");
  std::string sum_text, sum_vocab, sum_split;
  sum_cmd->add_option("--text", sum_text, "Split text")->required();
  sum_cmd->add_option("--vocab", sum_vocab, "Vocabulary file")->required();
  sum_cmd->add_option("--split", sum_split, "Split name (default: file stem)");

  // ngram-train
  auto* train_cmd = app.add_subcommand("ngram-train", "Train a Kneser-Ney n-gram model");
  std::string train_text, train_vocab, train_out;
  int train_order = 5;
  train_cmd->add_option("--train", train_text, "Training text")->required();
  train_cmd->add_option("--vocab", train_vocab, "Vocabulary file")->required();
  train_cmd->add_option("--order", train_order, "Model order, 1..5")->capture_default_str();
  train_cmd->add_option("--out", train_out, "Model file to write")->required();

  // ngram-score
  auto* score_cmd = app.add_subcommand("ngram-score", "Score a split and write its probability stream");
  std::string score_model, score_text, score_split, score_name, score_out, score_format;
  score_cmd->add_option("--model", score_model, "Model file")->required();
  score_cmd->add_option("--text", score_text, "Split text")->required();
  score_cmd->add_option("--split", score_split, "Split name (default: file stem)");
  score_cmd->add_option("--name", score_name, "Model name recorded in the stream")->required();
  score_cmd->add_option("--out", score_out, "Stream file to write")->required();
  score_cmd->add_option("--format", score_format, "text or binary (default: from extension)")
      ->check(CLI::IsMember({"text", "binary"}));

  // validate
  auto* val_cmd = app.add_subcommand("validate", "Check a stream file, optionally against a split");
  std::string val_stream, val_text, val_vocab, val_split;
  val_cmd->add_option("--stream", val_stream, "Stream file")->required();
  auto* val_text_opt = val_cmd->add_option("--text", val_text, "Split text to check alignment against");
  auto* val_vocab_opt = val_cmd->add_option("--vocab", val_vocab, "Vocabulary file");
  val_text_opt->needs(val_vocab_opt);
  val_vocab_opt->needs(val_text_opt);
  val_cmd->add_option("--split", val_split, "Split name (default: file stem)");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Fit ensemble weights on validation streams");
  std::vector<std::string> fit_streams;
  std::string fit_weights_out, fit_report_out, fit_trace_out;
  FitFlags fit_flags;
  fit_cmd->add_option("--stream", fit_streams, "Validation stream (repeatable)")->required();
  fit_cmd->add_option("--weights-out", fit_weights_out, "Weights file to write");
  fit_cmd->add_option("--report-out", fit_report_out, "Key:value fit report to write");
  fit_cmd->add_option("--trace-out", fit_trace_out, "Optimisation trace to write");
  fit_flags.attach(fit_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Report per-model and ensemble perplexities");
  std::vector<std::string> eval_valid, eval_test;
  std::string eval_weights, eval_report_out;
  FitFlags eval_flags;
  eval_cmd->add_option("--valid", eval_valid, "Validation stream (repeatable)")->required();
  eval_cmd->add_option("--test", eval_test, "Test stream (repeatable)")->required();
  eval_cmd->add_option("--weights", eval_weights, "Weights file (default: fit on --valid)");
  eval_cmd->add_option("--report-out", eval_report_out, "Tab-separated report to write");
  eval_flags.attach(eval_cmd);

  // loo
  auto* loo_cmd = app.add_subcommand("loo", "Leave-one-out contribution of each model");
  std::vector<std::string> loo_streams;
  std::string loo_out;
  FitFlags loo_flags;
  loo_cmd->add_option("--stream", loo_streams, "Validation stream (repeatable, at least two)")
      ->required();
  loo_cmd->add_option("--out", loo_out, "Tab-separated report to write");
  loo_flags.attach(loo_cmd);

  // add
  auto* add_cmd = app.add_subcommand("add", "Measure what adding one model does to an ensemble");
  std::vector<std::string> add_streams;
  std::string add_new, add_weights_out;
  FitFlags add_flags;
  add_cmd->add_option("--stream", add_streams, "Existing validation stream (repeatable)")->required();
  add_cmd->add_option("--new", add_new, "Validation stream of the model to add")->required();
  add_cmd->add_option("--weights-out", add_weights_out, "Weights file of the enlarged ensemble");
  add_flags.attach(add_cmd);

  // analyze
  auto* an_cmd = app.add_subcommand("analyze", "Per-word probability comparison as CSV");
  std::vector<std::string> an_streams;
  std::string an_text, an_vocab, an_split, an_out, an_span;
  std::size_t an_top = 20, an_context = 5;
  std::optional<std::size_t> an_sentence_at;
  an_cmd->add_option("--stream", an_streams, "Stream (repeatable, at least two)")->required();
  an_cmd->add_option("--text", an_text, "Split text the streams score")->required();
  an_cmd->add_option("--vocab", an_vocab, "Vocabulary file")->required();
  an_cmd->add_option("--split", an_split, "Split name (default: file stem)");
  an_cmd->add_option("--top", an_top, "Number of most divergent positions")->capture_default_str();
  an_cmd->add_option("--context", an_context, "Context tokens printed on each side")
      ->capture_default_str();
  auto* span_opt = an_cmd->add_option("--span", an_span, "Profile positions START:END instead of ranking");
  auto* sent_opt =
      an_cmd->add_option("--sentence-at", an_sentence_at, "Profile the sentence containing POSITION");
  span_opt->excludes(sent_opt);
  an_cmd->add_option("--out", an_out, "CSV file to write (default: standard output)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*vocab_cmd) {
      auto text = lmens::detail::read_file(vocab_train);
      lmens::VocabOptions opts;
      opts.max_size = vocab_max;
      opts.min_count = vocab_min;
      auto vocab = in_file(vocab_train, [&] { return lmens::build_vocab(text, opts); });
      write_output(vocab_out, vocab.to_file());
      std::cout << "vocabulary size " << vocab.size() << "\n";
    } else if (*sum_cmd) {
      auto corpus = read_corpus(sum_text, read_vocab(sum_vocab), sum_split);
      std::cout << corpus.split_name() << "\t" << corpus.size() << "\t" << corpus.checksum_hex()
                << "\n";
    } else if (*train_cmd) {
      if (train_order < 1 || train_order > lmens::NgramModel::kMaxOrder) {
        throw lmens::UsageError("--order must be in [1, 5]");
      }
      auto corpus = read_corpus(train_text, read_vocab(train_vocab), "train");
      auto model = lmens::train(corpus, train_order);
      write_output(train_out, model.save());
      std::cout << "trained order-" << train_order << " model on " << corpus.size() << " tokens\n";
    } else if (*score_cmd) {
      auto model_bytes = lmens::detail::read_file(score_model);
      auto model = in_file(score_model, [&] { return lmens::NgramModel::load(model_bytes); });
      auto corpus = read_corpus(score_text, model.shared_vocab(), score_split);
      auto stream = lmens::score_corpus(model, corpus, score_name, threads);
      const auto format = score_format.empty() ? lmens::format_for_path(score_out)
                          : score_format == "binary" ? lmens::StreamFormat::binary
                                                     : lmens::StreamFormat::text;
      write_output(score_out, lmens::write_stream(stream, format));
      const double h = stream.cross_entropy();
      std::cout << score_name << "\t" << corpus.split_name() << "\t" << corpus.size()
                << " tokens\tppl " << format_fixed(lmens::perplexity(h), 2) << "\n";
    } else if (*val_cmd) {
      auto stream = read_stream_file(val_stream);
      if (!val_text.empty()) {
        auto corpus = read_corpus(val_text, read_vocab(val_vocab), val_split);
        auto report = lmens::check_alignment(stream, corpus);
        if (!report.ok()) {
          std::cerr << val_stream << ": not aligned with " << val_text << ": " << report.describe()
                    << "\n";
          return kValidation;
        }
      }
      const auto& h = stream.header;
      std::cout << "ok\t" << h.model_name << "\t" << h.split_name << "\t" << h.n_tokens
                << " tokens\tppl " << format_fixed(lmens::perplexity(stream.cross_entropy()), 2)
                << "\n";
    } else if (*fit_cmd) {
      auto streams = read_streams(fit_streams);
      fit_flags.config.threads = threads;
      auto result = lmens::fit(streams, fit_flags.config);
      const auto report = lmens::format_fit_report(result);
      if (!fit_weights_out.empty()) write_output(fit_weights_out, lmens::format_weights_file(result.weights));
      if (!fit_report_out.empty()) write_output(fit_report_out, report);
      if (!fit_trace_out.empty()) write_output(fit_trace_out, lmens::format_trace(result));
      std::cout << report;
    } else if (*eval_cmd) {
      auto valid = read_streams(eval_valid);
      auto test = read_streams(eval_test);
      eval_flags.config.threads = threads;
      std::optional<lmens::EnsembleWeights> weights;
      if (!eval_weights.empty()) {
        auto text = lmens::detail::read_file(eval_weights);
        weights = in_file(eval_weights, [&] { return lmens::parse_weights_file(text); });
      } else {
        weights = lmens::fit(valid, eval_flags.config).weights;
      }
      auto report = lmens::evaluate(*weights, valid, test, threads);
      if (!eval_report_out.empty()) write_output(eval_report_out, lmens::format_report_tsv(report));
      std::cout << lmens::render_table(report);
      if (!report.no_harm()) {
        std::cerr << "warning: ensemble validation perplexity exceeds a single model's; "
                     "were the weights fitted on these validation streams?\n";
      }
    } else if (*loo_cmd) {
      auto streams = read_streams(loo_streams);
      loo_flags.config.threads = threads;
      auto report = lmens::fit_leave_one_out(streams, loo_flags.config);
      const double h_full = report.full.valid_cross_entropy;
      std::string out = "model\tweight\tH_without\tdelta_H\tdelta_ppl_pct\n";
      for (std::size_t j = 0; j < report.entries.size(); ++j) {
        const auto& e = report.entries[j];
        const double h_without = e.without.valid_cross_entropy;
        const double pct = 100.0 * (std::exp(h_without) - std::exp(h_full)) / std::exp(h_without);
        out += e.model_name + "\t" + format_fixed(report.full.weights.weights()[j], 6) + "\t" +
               format_g17(h_without) + "\t" + format_g17(e.delta_h) + "\t" + format_fixed(pct, 4) +
               "\n";
      }
      out += "full\t1\t" + format_g17(h_full) + "\t0\t0\n";
      if (!loo_out.empty()) write_output(loo_out, out);
      std::cout << out;
    } else if (*add_cmd) {
      auto existing = read_streams(add_streams);
      auto fresh = read_stream_file(add_new);
      add_flags.config.threads = threads;
      auto r = lmens::add_model(existing, fresh, add_flags.config);
      if (!add_weights_out.empty()) write_output(add_weights_out, lmens::format_weights_file(r.after.weights));
      std::cout << "new_model: " << fresh.header.model_name << "\n"
                << "new_weight: " << format_fixed(r.new_weight, 6) << "\n"
                << "H_before: " << format_g17(r.h_before) << "\n"
                << "H_after: " << format_g17(r.h_after) << "\n"
                << "delta_H: " << format_g17(r.delta_h) << "\n"
                << "ppl_before: " << format_fixed(std::exp(r.h_before), 2) << "\n"
                << "ppl_after: " << format_fixed(std::exp(r.h_after), 2) << "\n"
                << "delta_ppl_pct: " << format_fixed(r.delta_ppl_pct, 4) << "\n"
                << "stop_reason: " << lmens::to_string(r.after.stop_reason) << "\n"
                << "weights:\n"
                << describe_weights(r.after.weights);
    } else if (*an_cmd) {
      auto streams = read_streams(an_streams);
      auto corpus = read_corpus(an_text, read_vocab(an_vocab), an_split);
      std::vector<lmens::DivergenceRecord> records;
      if (!an_span.empty()) {
        const auto colon = an_span.find(':');
        auto lo = colon == std::string::npos ? std::nullopt
                                             : lmens::detail::parse_int<std::size_t>(
                                                   std::string_view(an_span).substr(0, colon));
        auto hi = colon == std::string::npos ? std::nullopt
                                             : lmens::detail::parse_int<std::size_t>(
                                                   std::string_view(an_span).substr(colon + 1));
        if (!lo || !hi) throw lmens::UsageError("--span expects START:END");
        records = lmens::sentence_profile(streams, corpus, *lo, *hi, an_context);
      } else if (an_sentence_at) {
        const auto [lo, hi] = corpus.enclosing_sentence(*an_sentence_at);
        records = lmens::sentence_profile(streams, corpus, lo, hi, an_context);
      } else {
        records = lmens::rank_divergences(streams, corpus, an_top, an_context);
      }
      const auto csv = lmens::format_divergence_csv(streams, records);
      if (an_out.empty()) {
        std::cout << csv;
      } else {
        write_output(an_out, csv);
        for (const auto& r : records) {
          std::string ctx;
          for (const auto& t : r.context_window) ctx += (ctx.empty() ? "" : " ") + t;
          std::cout << r.position << "\t" << r.token << "\tspread " << format_fixed(r.spread, 4)
                    << "\tleader " << r.leader << "\t[" << ctx << "]\n";
        }
      }
    }
  } catch (const lmens::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const lmens::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const lmens::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}
