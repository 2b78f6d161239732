#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lmens/detail/sha256.hpp"
#include "lmens/detail/text.hpp"
#include "lmens/error.hpp"

namespace lmens {

using TokenId = std::uint32_t;
using Checksum = detail::Digest256;

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "</s>";

/// Dense token <-> id mapping. Always contains the unknown-word and
/// end-of-sentence tokens, so V >= 2.
class Vocabulary {
 public:
  /// Builds from tokens in rank order. Duplicates keep their first rank;
  /// `<unk>` and `</s>` are appended when missing.
  explicit Vocabulary(std::vector<std::string> tokens) {
    tokens_.reserve(tokens.size() + 2);
    for (auto& t : tokens) {
      if (t.empty()) throw ValidationError("vocabulary: empty token");
      if (index_.contains(t)) continue;
      index_.emplace(t, static_cast<TokenId>(tokens_.size()));
      tokens_.push_back(std::move(t));
    }
    unk_id_ = intern(kUnkToken);
    eos_id_ = intern(kEosToken);
  }

  std::size_t size() const { return tokens_.size(); }
  TokenId unk_id() const { return unk_id_; }
  TokenId eos_id() const { return eos_id_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id_or_unk(std::string_view token) const { return find(token).value_or(unk_id_); }

  /// One token per line, rank order.
  std::string to_file() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  /// Parses the vocabulary file format: one token per line, `#` lines and
  /// blank lines ignored.
  static Vocabulary from_file(std::string_view text) {
    std::vector<std::string> tokens;
    for (auto line : detail::split_lines(text)) {
      auto t = detail::trim(line);
      if (t.empty() || t.front() == '#') continue;
      if (detail::split_whitespace(t).size() != 1) {
        throw FormatError("vocabulary: line contains whitespace inside a token: '" +
                          std::string(t) + "'");
      }
      tokens.emplace_back(t);
    }
    return Vocabulary(std::move(tokens));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  TokenId intern(std::string_view t) {
    if (auto id = find(t)) return *id;
    auto id = static_cast<TokenId>(tokens_.size());
    tokens_.emplace_back(t);
    index_.emplace(tokens_.back(), id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId unk_id_ = 0;
  TokenId eos_id_ = 0;
};

struct VocabOptions {
  std::optional<std::size_t> max_size;  ///< real tokens kept, before unk/eos insertion
  std::size_t min_count = 0;
};

/// Ranks whitespace tokens by descending frequency (ties lexicographic),
/// drops those below `min_count`, truncates to `max_size`.
inline Vocabulary build_vocab(std::string_view training_text, const VocabOptions& options = {}) {
  std::unordered_map<std::string_view, std::size_t> counts;
  for (auto tok : detail::split_whitespace(training_text)) ++counts[tok];
  if (counts.empty()) throw ValidationError("empty training text");

  std::vector<std::pair<std::string_view, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> tokens;
  for (const auto& [tok, count] : ranked) {
    if (count < options.min_count) continue;
    if (options.max_size && tokens.size() >= *options.max_size) break;
    tokens.emplace_back(tok);
  }
  return Vocabulary(std::move(tokens));
}

/// Hash over the id sequence serialised as 64-bit little-endian integers.
inline Checksum checksum_ids(std::span<const TokenId> ids) {
  detail::Sha256 sha;
  std::vector<std::uint8_t> buf;
  constexpr std::size_t kChunk = 4096;
  buf.reserve(kChunk * 8);
  for (std::size_t i = 0; i < ids.size(); i += kChunk) {
    buf.clear();
    const std::size_t end = std::min(ids.size(), i + kChunk);
    for (std::size_t j = i; j < end; ++j) {
      const std::uint64_t v = ids[j];
      for (int b = 0; b < 8; ++b) buf.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
    sha.update(buf);
  }
  return sha.finish();
}

/// A tokenised split. Immutable once built.
class Corpus {
 public:
  Corpus(std::string split_name, std::vector<TokenId> token_ids,
         std::shared_ptr<const Vocabulary> vocab)
      : split_name_(std::move(split_name)), ids_(std::move(token_ids)), vocab_(std::move(vocab)) {
    if (!vocab_) throw UsageError("corpus: null vocabulary");
    if (ids_.empty()) throw ValidationError("corpus '" + split_name_ + "' has no tokens");
    const auto v = vocab_->size();
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (ids_[i] >= v) {
        throw ValidationError("corpus: token id " + std::to_string(ids_[i]) + " at index " +
                              std::to_string(i) + " is outside the vocabulary");
      }
    }
    checksum_ = checksum_ids(ids_);
  }

  const std::string& split_name() const { return split_name_; }
  std::span<const TokenId> token_ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  const Vocabulary& vocab() const { return *vocab_; }
  std::shared_ptr<const Vocabulary> shared_vocab() const { return vocab_; }
  const Checksum& checksum() const { return checksum_; }
  std::string checksum_hex() const { return detail::to_hex(checksum_); }

  const std::string& token(std::size_t position) const { return vocab_->token(ids_.at(position)); }

  /// [begin, end) of the eos-terminated sentence containing `position`.
  std::pair<std::size_t, std::size_t> enclosing_sentence(std::size_t position) const {
    if (position >= ids_.size()) throw UsageError("position out of range");
    const auto eos = vocab_->eos_id();
    std::size_t begin = position;
    while (begin > 0 && ids_[begin - 1] != eos) --begin;
    std::size_t end = position;
    while (end < ids_.size() && ids_[end] != eos) ++end;
    return {begin, std::min(ids_.size(), end + 1)};
  }

 private:
  std::string split_name_;
  std::vector<TokenId> ids_;
  std::shared_ptr<const Vocabulary> vocab_;
  Checksum checksum_{};
};

/// Maps every line to ids (OOV -> unk) followed by eos. Tokens are taken
/// verbatim: no case folding or punctuation handling.
inline Corpus load_corpus(std::string_view text, std::shared_ptr<const Vocabulary> vocab,
                          std::string split_name) {
  if (!vocab) throw UsageError("load_corpus: null vocabulary");
  if (text.empty()) throw ValidationError("corpus '" + split_name + "': empty text");
  std::vector<TokenId> ids;
  ids.reserve(text.size() / 4);
  for (auto line : detail::split_lines(text)) {
    for (auto tok : detail::split_whitespace(line)) ids.push_back(vocab->id_or_unk(tok));
    ids.push_back(vocab->eos_id());
  }
  return Corpus(std::move(split_name), std::move(ids), std::move(vocab));
}

inline Corpus load_corpus(std::string_view text, const Vocabulary& vocab, std::string split_name) {
  return load_corpus(text, std::make_shared<const Vocabulary>(vocab), std::move(split_name));
}

}  // namespace lmens
