#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <random>

#include "lmens/probstream.hpp"
#include "support/synthetic.hpp"

namespace {

using lmens::ProbStream;
using lmens::read_stream;
using lmens::StreamFormat;
using lmens::write_stream;
using lmens::testing::stream_of;

std::string hex_of(const lmens::Checksum& c) { return lmens::detail::to_hex(c); }

std::string text_stream(std::string_view body_header_overrides, std::string_view body) {
  return std::string(body_header_overrides) + std::string(body);
}

std::string good_header(std::size_t n, std::string_view base = "e") {
  return "%lmps 1\nmodel: m\nsplit: valid\nntokens: " + std::to_string(n) +
         "\ncorpus_sha256: " + hex_of(lmens::testing::synthetic_checksum(n)) + "\nbase: " +
         std::string(base) + "\n%end\n";
}

TEST(ProbStream, TextBodyOfCertainToken) {
  auto s = stream_of("m", {0.0});
  auto text = write_stream(s, StreamFormat::text);
  EXPECT_TRUE(text.ends_with("%end\n0\n")) << text;
  EXPECT_TRUE(text.starts_with("%lmps 1\nmodel: m\nsplit: valid\nntokens: 1\ncorpus_sha256: "));
  EXPECT_NE(text.find("\nbase: e\n%end\n"), std::string::npos);
}

TEST(ProbStream, BinaryPayloadIsEightBytesPerValue) {
  auto s = stream_of("m", {-1.5, -2.25});
  auto bin = write_stream(s, StreamFormat::binary);
  ASSERT_TRUE(bin.starts_with("LMPS"));
  // magic, version, header length, header, values
  const std::uint32_t header_len = static_cast<unsigned char>(bin[8]) |
                                   (static_cast<unsigned char>(bin[9]) << 8) |
                                   (static_cast<unsigned char>(bin[10]) << 16) |
                                   (static_cast<unsigned char>(bin[11]) << 24);
  EXPECT_EQ(bin[4], 1);
  EXPECT_EQ(bin.size(), 12 + header_len + 16);
  double first = 0.0;
  std::memcpy(&first, bin.data() + 12 + header_len, 8);
  EXPECT_EQ(first, -1.5);
}

TEST(ProbStream, LengthMismatchInText) {
  auto bytes = text_stream(good_header(3), "-1\n-2\n");
  try {
    read_stream(bytes);
    FAIL() << "expected a length mismatch";
  } catch (const lmens::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("length mismatch"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
}

TEST(ProbStream, PositiveValueNamesIndex) {
  std::string body;
  for (int i = 0; i < 10; ++i) body += (i == 7 ? "0.5\n" : "-1\n");
  try {
    read_stream(text_stream(good_header(10), body));
    FAIL();
  } catch (const lmens::ValidationError& e) {
    EXPECT_STREQ(e.what(), "logprob exceeds 0 at index 7");
  }
}

TEST(ProbStream, TinyPositiveValuesAreClamped) {
  auto s = read_stream(text_stream(good_header(3), "-1\n1e-7\n1e-6\n"));
  EXPECT_EQ(s.logprobs[1], 0.0);
  EXPECT_EQ(s.logprobs[2], 0.0);
  EXPECT_FALSE(std::signbit(s.logprobs[1]));
}

TEST(ProbStream, RejectsNonFinite) {
  EXPECT_THROW(read_stream(text_stream(good_header(2), "-1\nnan\n")), lmens::ValidationError);
  EXPECT_THROW(read_stream(text_stream(good_header(2), "-inf\n-1\n")), lmens::ValidationError);
  std::vector<double> v{-1.0, std::numeric_limits<double>::quiet_NaN()};
  ProbStream s;
  s.header = {"m", "valid", 2, lmens::testing::synthetic_checksum(2), "e"};
  s.logprobs = v;
  EXPECT_THROW(write_stream(s, StreamFormat::binary), lmens::ValidationError);
}

TEST(ProbStream, FirstOffendingIndexIsReported) {
  try {
    read_stream(text_stream(good_header(5), "-1\n-1\n3\nnan\n1\n"));
    FAIL();
  } catch (const lmens::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos) << e.what();
  }
}

TEST(ProbStream, MalformedHeaders) {
  EXPECT_THROW(read_stream("hello\n"), lmens::FormatError);
  EXPECT_THROW(read_stream("%lmps 2\n"), lmens::FormatError);
  EXPECT_THROW(read_stream(text_stream(good_header(1, "10"), "-1\n")), lmens::FormatError);
  auto bad_sum = good_header(1);
  bad_sum.replace(bad_sum.find("corpus_sha256: ") + 15, 4, "zzzz");
  EXPECT_THROW(read_stream(bad_sum + "-1\n"), lmens::FormatError);
  auto short_sum = good_header(1);
  short_sum.erase(short_sum.find("corpus_sha256: ") + 15, 2);
  EXPECT_THROW(read_stream(short_sum + "-1\n"), lmens::FormatError);
  EXPECT_THROW(read_stream("%lmps 1\nmodel: m\n%end\n-1\n"), lmens::FormatError);
  EXPECT_THROW(read_stream("%lmps 1\nmodel: m\nsplit: v\n"), lmens::FormatError);
  EXPECT_THROW(read_stream(text_stream(good_header(0), "")), lmens::ValidationError);
}

TEST(ProbStream, BinaryTruncationAndBadVersion) {
  auto bin = write_stream(stream_of("m", {-1.0, -2.0}), StreamFormat::binary);
  EXPECT_THROW(read_stream(bin.substr(0, bin.size() - 3)), lmens::ValidationError);
  EXPECT_THROW(read_stream(bin.substr(0, 6)), lmens::FormatError);
  auto v2 = bin;
  v2[4] = 2;
  EXPECT_THROW(read_stream(v2), lmens::FormatError);
  auto magic = bin;
  magic[0] = 'X';
  EXPECT_THROW(read_stream(magic), lmens::FormatError);
}

TEST(ProbStream, HeaderFieldsMustBeSingleLine) {
  auto s = stream_of("m", {-1.0});
  s.header.model_name = "two\nlines";
  EXPECT_THROW(write_stream(s, StreamFormat::text), lmens::ValidationError);
}

// Random streams survive a write/read cycle: bitwise in binary, value-equal
// in text (17 significant digits), and so does their cross-entropy.
TEST(ProbStreamProperty, RoundTrip) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(1, 400);
  std::uniform_real_distribution<double> mag(0.0, 30.0);
  std::bernoulli_distribution exact_zero(0.05);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(len(rng));
    for (auto& x : v) x = exact_zero(rng) ? 0.0 : -mag(rng) * std::pow(10.0, -mag(rng) / 5.0);
    auto s = stream_of("model-" + std::to_string(trial), v, trial % 2 ? "valid" : "test");
    auto bin = read_stream(write_stream(s, StreamFormat::binary));
    auto txt = read_stream(write_stream(s, StreamFormat::text));
    ASSERT_EQ(bin.header, s.header);
    ASSERT_EQ(txt.header, s.header);
    for (std::size_t i = 0; i < v.size(); ++i) {
      ASSERT_EQ(std::bit_cast<std::uint64_t>(bin.logprobs[i]), std::bit_cast<std::uint64_t>(v[i]));
      ASSERT_EQ(txt.logprobs[i], v[i]);
    }
    ASSERT_EQ(bin.cross_entropy(), s.cross_entropy());
    ASSERT_EQ(txt.cross_entropy(), s.cross_entropy());
  }
}

TEST(Alignment, StreamAgainstItsCorpus) {
  auto vocab = std::make_shared<const lmens::Vocabulary>(std::vector<std::string>{"a", "b"});
  auto corpus = lmens::load_corpus("a b\nb a\n", vocab, "valid");
  auto s = lmens::make_stream("m", "valid", corpus.checksum(), std::vector<double>(6, -1.0));
  EXPECT_TRUE(lmens::check_alignment(s, corpus).ok());

  auto altered = lmens::load_corpus("a b\nb b\n", vocab, "valid");
  auto r = lmens::check_alignment(s, altered);
  ASSERT_EQ(r.mismatches.size(), 1u);
  EXPECT_EQ(r.mismatches[0].field, "corpus_sha256");
  EXPECT_EQ(r.mismatches[0].expected, altered.checksum_hex());
  EXPECT_EQ(r.mismatches[0].found, corpus.checksum_hex());

  auto short_stream = lmens::make_stream("m", "valid", corpus.checksum(), std::vector<double>(5, -1.0));
  auto r2 = lmens::check_alignment(short_stream, corpus);
  ASSERT_EQ(r2.mismatches.size(), 1u);
  EXPECT_EQ(r2.mismatches[0].field, "ntokens");
  EXPECT_EQ(r2.mismatches[0].expected, "6");
  EXPECT_EQ(r2.mismatches[0].found, "5");

  auto other_split = lmens::load_corpus("a b\nb a\n", vocab, "test");
  auto r3 = lmens::check_alignment(s, other_split);
  ASSERT_EQ(r3.mismatches.size(), 1u);
  EXPECT_EQ(r3.mismatches[0].field, "split");
}

}  // namespace
