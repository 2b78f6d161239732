#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmens/corpus.hpp"
#include "lmens/detail/binary_io.hpp"
#include "lmens/detail/sha256.hpp"
#include "lmens/detail/summation.hpp"
#include "lmens/detail/text.hpp"
#include "lmens/error.hpp"

namespace lmens {

/// Values in (0, kLogProbClampLimit] are rounding noise around ln 1 and are
/// stored as 0; anything larger is a probability above one.
inline constexpr double kLogProbClampLimit = 1e-6;

/// Writers must not emit probabilities below this; ln(1e-12).
inline const double kLogProbFloor = std::log(1e-12);

inline constexpr std::string_view kNaturalLogMarker = "e";

enum class StreamFormat { text, binary };

struct StreamHeader {
  std::string model_name;
  std::string split_name;
  std::uint64_t n_tokens = 0;
  Checksum corpus_checksum{};
  std::string log_base{kNaturalLogMarker};

  friend bool operator==(const StreamHeader&, const StreamHeader&) = default;
};

/// One model's natural-log probabilities of the observed tokens of one split.
struct ProbStream {
  StreamHeader header;
  std::vector<double> logprobs;

  double cross_entropy() const;

  friend bool operator==(const ProbStream&, const ProbStream&) = default;
};

namespace detail {

inline void check_header_field(std::string_view key, std::string_view value) {
  if (value.find('\n') != std::string_view::npos || value.find('\r') != std::string_view::npos) {
    throw ValidationError(std::string("stream header field '") + std::string(key) +
                          "' contains a line break");
  }
  if (trim(value) != value || value.empty()) {
    throw ValidationError(std::string("stream header field '") + std::string(key) +
                          "' is empty or has surrounding whitespace");
  }
}

}  // namespace detail

/// Enforces the header invariants and the value rules on `stream` in place:
/// clamps (0, 1e-6] to 0 and rejects the first non-finite or positive value.
inline void validate(ProbStream& stream) {
  const auto& h = stream.header;
  if (h.log_base != kNaturalLogMarker) {
    throw FormatError("unsupported log base '" + h.log_base + "' (expected 'e')");
  }
  if (h.n_tokens < 1) throw ValidationError("stream declares zero tokens");
  detail::check_header_field("model", h.model_name);
  detail::check_header_field("split", h.split_name);
  if (stream.logprobs.size() != h.n_tokens) {
    throw ValidationError("length mismatch: header declares " + std::to_string(h.n_tokens) +
                          " tokens, found " + std::to_string(stream.logprobs.size()));
  }
  for (std::size_t i = 0; i < stream.logprobs.size(); ++i) {
    double& v = stream.logprobs[i];
    if (!std::isfinite(v)) {
      throw ValidationError("non-finite logprob at index " + std::to_string(i));
    }
    if (v > kLogProbClampLimit) {
      throw ValidationError("logprob exceeds 0 at index " + std::to_string(i));
    }
    if (v > 0.0) v = 0.0;
  }
}

/// Builds a validated stream; the usual way for producers to create one.
inline ProbStream make_stream(std::string model_name, std::string split_name,
                              const Checksum& corpus_checksum, std::vector<double> logprobs) {
  ProbStream s;
  s.header.model_name = std::move(model_name);
  s.header.split_name = std::move(split_name);
  s.header.n_tokens = logprobs.size();
  s.header.corpus_checksum = corpus_checksum;
  s.logprobs = std::move(logprobs);
  validate(s);
  return s;
}

inline double ProbStream::cross_entropy() const {
  if (logprobs.empty()) return 0.0;
  return -detail::pairwise_sum(logprobs) / static_cast<double>(logprobs.size());
}

namespace detail {

inline std::string header_block(const StreamHeader& h) {
  std::string out;
  out += "model: " + h.model_name + "\n";
  out += "split: " + h.split_name + "\n";
  out += "ntokens: " + std::to_string(h.n_tokens) + "\n";
  out += "corpus_sha256: " + to_hex(h.corpus_checksum) + "\n";
  out += "base: " + h.log_base + "\n";
  return out;
}

/// Parses "key: value" lines into a header. Every key must appear exactly once.
inline StreamHeader parse_header_lines(std::span<const std::string_view> lines) {
  StreamHeader h;
  bool seen[5] = {false, false, false, false, false};
  static constexpr std::string_view kKeys[5] = {"model", "split", "ntokens", "corpus_sha256",
                                                "base"};
  for (auto line : lines) {
    auto colon = line.find(':');
    if (colon == std::string_view::npos) {
      throw FormatError("malformed header line '" + std::string(line) + "'");
    }
    auto key = trim(line.substr(0, colon));
    auto value = trim(line.substr(colon + 1));
    std::size_t k = 0;
    while (k < 5 && kKeys[k] != key) ++k;
    if (k == 5) throw FormatError("unknown header key '" + std::string(key) + "'");
    if (seen[k]) throw FormatError("duplicate header key '" + std::string(key) + "'");
    seen[k] = true;
    switch (k) {
      case 0: h.model_name = std::string(value); break;
      case 1: h.split_name = std::string(value); break;
      case 2: {
        auto n = parse_int<std::uint64_t>(value);
        if (!n) throw FormatError("malformed ntokens '" + std::string(value) + "'");
        h.n_tokens = *n;
        break;
      }
      case 3: {
        auto digest = digest_from_hex(value);
        if (!digest) {
          throw FormatError("malformed corpus_sha256 '" + std::string(value) +
                            "' (expected 64 hex characters)");
        }
        h.corpus_checksum = *digest;
        break;
      }
      case 4: h.log_base = std::string(value); break;
    }
  }
  for (std::size_t k = 0; k < 5; ++k) {
    if (!seen[k]) throw FormatError("missing header key '" + std::string(kKeys[k]) + "'");
  }
  if (h.log_base != kNaturalLogMarker) {
    throw FormatError("unsupported log base '" + h.log_base + "' (expected 'e')");
  }
  return h;
}

inline constexpr std::string_view kTextMagic = "%lmps 1";
inline constexpr std::string_view kTextEnd = "%end";
inline constexpr std::string_view kBinaryMagic = "LMPS";
inline constexpr std::uint32_t kBinaryVersion = 1;

inline ProbStream read_text_stream(std::string_view bytes) {
  auto lines = split_lines(bytes);
  if (lines.empty() || trim(lines[0]) != kTextMagic) {
    throw FormatError("bad magic: expected '%lmps 1'");
  }
  std::size_t end = 1;
  while (end < lines.size() && trim(lines[end]) != kTextEnd) ++end;
  if (end == lines.size()) throw FormatError("header not terminated by '%end'");

  ProbStream s;
  s.header = parse_header_lines(std::span(lines).subspan(1, end - 1));
  const std::size_t body = lines.size() - end - 1;
  if (body != s.header.n_tokens) {
    throw ValidationError("length mismatch: header declares " + std::to_string(s.header.n_tokens) +
                          " tokens, found " + std::to_string(body));
  }
  s.logprobs.reserve(body);
  for (std::size_t i = 0; i < body; ++i) {
    auto v = parse_double(trim(lines[end + 1 + i]));
    if (!v) {
      throw FormatError("unparseable logprob at index " + std::to_string(i) + ": '" +
                        std::string(lines[end + 1 + i]) + "'");
    }
    s.logprobs.push_back(*v);
  }
  return s;
}

inline ProbStream read_binary_stream(std::string_view bytes) {
  ByteReader in(bytes);
  if (in.take(4, "magic") != kBinaryMagic) throw FormatError("bad magic: expected 'LMPS'");
  const auto version = in.u32("version");
  if (version != kBinaryVersion) {
    throw FormatError("unsupported binary stream version " + std::to_string(version));
  }
  const auto header_text = in.string("header");
  auto lines = split_lines(header_text);
  ProbStream s;
  s.header = parse_header_lines(lines);
  const std::size_t available = in.remaining() / 8;
  if (in.remaining() % 8 != 0 || available != s.header.n_tokens) {
    throw ValidationError("length mismatch: header declares " + std::to_string(s.header.n_tokens) +
                          " tokens, found " + std::to_string(available) +
                          (in.remaining() % 8 ? " (plus trailing partial value)" : ""));
  }
  s.logprobs.resize(available);
  for (auto& v : s.logprobs) v = in.f64("logprob");
  return s;
}

}  // namespace detail

inline std::string write_stream(const ProbStream& stream, StreamFormat format) {
  ProbStream checked = stream;
  validate(checked);
  std::string out;
  if (format == StreamFormat::text) {
    out += detail::kTextMagic;
    out += '\n';
    out += detail::header_block(checked.header);
    out += detail::kTextEnd;
    out += '\n';
    for (double v : checked.logprobs) {
      out += detail::format_g17(v);
      out += '\n';
    }
  } else {
    out += detail::kBinaryMagic;
    detail::append_u32(out, detail::kBinaryVersion);
    detail::append_string(out, detail::header_block(checked.header));
    out.reserve(out.size() + 8 * checked.logprobs.size());
    for (double v : checked.logprobs) detail::append_f64(out, v);
  }
  return out;
}

/// Detects the format from the leading magic, parses, and validates.
inline ProbStream read_stream(std::string_view bytes) {
  ProbStream s;
  if (bytes.starts_with(detail::kBinaryMagic)) {
    s = detail::read_binary_stream(bytes);
  } else if (bytes.starts_with("%lmps")) {
    s = detail::read_text_stream(bytes);
  } else {
    throw FormatError("bad magic: not an lmps stream");
  }
  validate(s);
  return s;
}

/// `.lmpsb` means binary, anything else text.
inline StreamFormat format_for_path(std::string_view path) {
  return path.ends_with(".lmpsb") ? StreamFormat::binary : StreamFormat::text;
}

struct FieldMismatch {
  std::string field;
  std::string expected;
  std::string found;
};

struct AlignmentReport {
  std::vector<FieldMismatch> mismatches;

  bool ok() const { return mismatches.empty(); }

  std::string describe() const {
    std::string out;
    for (const auto& m : mismatches) {
      if (!out.empty()) out += "; ";
      out += m.field + " mismatch: expected " + m.expected + ", found " + m.found;
    }
    return out;
  }
};

inline AlignmentReport check_alignment(const ProbStream& stream, const Corpus& corpus) {
  AlignmentReport r;
  const auto& h = stream.header;
  if (h.n_tokens != corpus.size()) {
    r.mismatches.push_back({"ntokens", std::to_string(corpus.size()), std::to_string(h.n_tokens)});
  }
  if (h.corpus_checksum != corpus.checksum()) {
    r.mismatches.push_back(
        {"corpus_sha256", corpus.checksum_hex(), detail::to_hex(h.corpus_checksum)});
  }
  if (h.split_name != corpus.split_name()) {
    r.mismatches.push_back({"split", corpus.split_name(), h.split_name});
  }
  return r;
}

/// Differences in the fields that decide whether two streams score the same
/// token sequence.
inline AlignmentReport compare_headers(const StreamHeader& expected, const StreamHeader& found) {
  AlignmentReport r;
  if (found.n_tokens != expected.n_tokens) {
    r.mismatches.push_back(
        {"ntokens", std::to_string(expected.n_tokens), std::to_string(found.n_tokens)});
  }
  if (found.corpus_checksum != expected.corpus_checksum) {
    r.mismatches.push_back({"corpus_sha256", detail::to_hex(expected.corpus_checksum),
                            detail::to_hex(found.corpus_checksum)});
  }
  if (found.split_name != expected.split_name) {
    r.mismatches.push_back({"split", expected.split_name, found.split_name});
  }
  return r;
}

inline void require_aligned(const StreamHeader& reference, const StreamHeader& other) {
  auto r = compare_headers(reference, other);
  if (!r.ok()) {
    throw ValidationError("stream '" + other.model_name + "' is not aligned with '" +
                          reference.model_name + "': " + r.describe());
  }
}

/// Throws unless every stream scores the same token sequence as the first.
inline void require_mutual_alignment(std::span<const ProbStream> streams) {
  for (std::size_t j = 1; j < streams.size(); ++j) {
    require_aligned(streams.front().header, streams[j].header);
  }
}

inline void require_alignment(const ProbStream& stream, const Corpus& corpus) {
  auto r = check_alignment(stream, corpus);
  if (!r.ok()) {
    throw ValidationError("stream '" + stream.header.model_name + "' is not aligned with corpus '" +
                          corpus.split_name() + "': " + r.describe());
  }
}

}  // namespace lmens
