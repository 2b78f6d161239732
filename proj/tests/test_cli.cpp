#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "lmens/lmens.hpp"
#include "lmens/detail/files.hpp"
#include "support/synthetic.hpp"

#ifndef LMENS_CLI_PATH
#error "LMENS_CLI_PATH must point at the lmens executable"
#endif

namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("lmens_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) +
            "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& body) const {
    std::ofstream(path(name), std::ios::binary) << body;
  }

  std::string read(const std::string& name) const { return lmens::detail::read_file(path(name)); }

  // Runs the CLI with `args`; stdout and stderr are captured into out_/err_.
  int run(const std::string& args) {
    const std::string cmd = std::string(LMENS_CLI_PATH) + " " + args + " >" + path("stdout.txt") +
                            " 2>" + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    out_ = read("stdout.txt");
    err_ = read("stderr.txt");
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
  std::string out_, err_;
};

TEST_F(Cli, HelpOnEverySubcommand) {
  EXPECT_EQ(run("--help"), 0);
  for (const char* sub : {"vocab", "checksum", "ngram-train", "ngram-score", "validate", "fit", "eval",
                          "loo", "add", "analyze"}) {
    EXPECT_EQ(run(std::string(sub) + " --help"), 0) << sub;
    EXPECT_NE(out_.find("--"), std::string::npos) << sub;
  }
}

TEST_F(Cli, UsageAndIoErrors) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("fit"), 2);
  EXPECT_EQ(run("fit --stream " + path("missing.lmps")), 3);
  EXPECT_NE(err_.find("missing.lmps"), std::string::npos);
}

TEST_F(Cli, FitSingleStream) {
  auto s = lmens::testing::stream_of("model", {-1.0, -2.0, -3.0});
  write("m.lmps", lmens::write_stream(s, lmens::StreamFormat::text));
  ASSERT_EQ(run("fit --stream " + path("m.lmps") + " --weights-out " + path("w.txt")), 0) << err_;
  EXPECT_TRUE(read("w.txt").starts_with("model 1.000000 "));
}

TEST_F(Cli, MalformedStreamIsValidationFailure) {
  write("bad.lmps", "%lmps 1\nmodel: m\nsplit: valid\nntokens: 3\ncorpus_sha256: " +
                        std::string(64, '0') + "\nbase: e\n%end\n-1\n-2\n");
  EXPECT_EQ(run("validate --stream " + path("bad.lmps")), 1);
  EXPECT_NE(err_.find("length mismatch"), std::string::npos) << err_;
}

TEST_F(Cli, ValidateNamesBothChecksums) {
  write("valid.txt", "a b c\nc b a\n");
  write("other.txt", "a a a\nb b b\n");
  ASSERT_EQ(run("vocab --train " + path("valid.txt") + " --out " + path("vocab.txt")), 0) << err_;
  ASSERT_EQ(run("ngram-train --train " + path("valid.txt") + " --vocab " + path("vocab.txt") +
                " --order 2 --out " + path("m.lmkn")),
            0)
      << err_;
  ASSERT_EQ(run("ngram-score --model " + path("m.lmkn") + " --text " + path("other.txt") +
                " --split valid --name kn2 --out " + path("s.lmps")),
            0)
      << err_;
  ASSERT_EQ(run("checksum --text " + path("valid.txt") + " --vocab " + path("vocab.txt")), 0);
  const auto expected = out_;
  EXPECT_EQ(run("validate --stream " + path("s.lmps") + " --text " + path("valid.txt") + " --vocab " +
                path("vocab.txt")),
            1);
  const auto s = lmens::read_stream(read("s.lmps"));
  const auto msg = out_ + err_;
  EXPECT_NE(msg.find(lmens::detail::to_hex(s.header.corpus_checksum)), std::string::npos) << msg;
  auto vocab = lmens::Vocabulary::from_file(read("vocab.txt"));
  auto corpus = lmens::load_corpus(read("valid.txt"), vocab, "valid");
  EXPECT_NE(msg.find(corpus.checksum_hex()), std::string::npos) << msg;
  EXPECT_NE(expected.find(corpus.checksum_hex()), std::string::npos) << expected;
}

TEST_F(Cli, EndToEndPipeline) {
  write("train.txt", lmens::testing::phrase_corpus_text(1, 20000));
  write("valid.txt", lmens::testing::phrase_corpus_text(2, 3000));
  write("test.txt", lmens::testing::phrase_corpus_text(3, 3000));
  ASSERT_EQ(run("vocab --train " + path("train.txt") + " --out " + path("vocab.txt")), 0) << err_;
  for (int order : {2, 5}) {
    const auto o = std::to_string(order);
    ASSERT_EQ(run("ngram-train --train " + path("train.txt") + " --vocab " + path("vocab.txt") +
                  " --order " + o + " --out " + path("kn" + o + ".lmkn")),
              0)
        << err_;
    for (const char* split : {"valid", "test"}) {
      const std::string ext = std::string(split) == "valid" ? ".lmps" : ".lmpsb";
      ASSERT_EQ(run("ngram-score --model " + path("kn" + o + ".lmkn") + " --text " +
                    path(std::string(split) + ".txt") + " --name kn" + o + " --out " +
                    path("kn" + o + "." + split + ext)),
                0)
          << err_;
    }
    ASSERT_EQ(run("validate --stream " + path("kn" + o + ".valid.lmps") + " --text " + path("valid.txt") +
                  " --vocab " + path("vocab.txt")),
              0)
        << err_;
  }
  const std::string valid = " --stream " + path("kn2.valid.lmps") + " --stream " + path("kn5.valid.lmps");
  ASSERT_EQ(run("fit" + valid + " --weights-out " + path("w.txt") + " --report-out " + path("r.txt") +
                " --trace-out " + path("t.tsv")),
            0)
      << err_;
  const auto weights = lmens::parse_weights_file(read("w.txt"));
  EXPECT_GT(weights.weights()[1], weights.weights()[0]);
  EXPECT_NE(read("r.txt").find("stop_reason: "), std::string::npos);

  ASSERT_EQ(run("eval --valid " + path("kn2.valid.lmps") + " --valid " + path("kn5.valid.lmps") + " --test " +
                path("kn2.test.lmpsb") + " --test " + path("kn5.test.lmpsb") + " --weights " + path("w.txt") +
                " --report-out " + path("report.tsv")),
            0)
      << err_;
  EXPECT_NE(out_.find("Ensemble"), std::string::npos);
  // Re-derive the ensemble numbers from the written streams.
  std::vector<lmens::ProbStream> v{lmens::read_stream(read("kn2.valid.lmps")),
                                   lmens::read_stream(read("kn5.valid.lmps"))};
  std::vector<lmens::ProbStream> t{lmens::read_stream(read("kn2.test.lmpsb")),
                                   lmens::read_stream(read("kn5.test.lmpsb"))};
  auto report = lmens::evaluate(weights, v, t);
  EXPECT_TRUE(report.no_harm(1e-9));
  EXPECT_EQ(read("report.tsv"), lmens::format_report_tsv(report));

  const auto first = read("w.txt");
  ASSERT_EQ(run("fit" + valid + " --weights-out " + path("w.txt")), 0);
  EXPECT_EQ(read("w.txt"), first);
  ASSERT_EQ(run("--threads 1 fit" + valid + " --weights-out " + path("w.txt")), 0);
  EXPECT_EQ(read("w.txt"), first);

  EXPECT_EQ(run("loo" + valid + " --out " + path("loo.tsv")), 0) << err_;
  EXPECT_FALSE(read("loo.tsv").empty());
  EXPECT_EQ(run("add --stream " + path("kn2.valid.lmps") + " --new " + path("kn5.valid.lmps")), 0) << err_;
  EXPECT_EQ(run("analyze" + valid + " --text " + path("valid.txt") + " --vocab " + path("vocab.txt") +
                " --top 10 --out " + path("div.csv")),
            0)
      << err_;
  EXPECT_EQ(lmens::detail::split_lines(read("div.csv")).size(), 11u);
}

}  // namespace
