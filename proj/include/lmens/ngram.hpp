#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lmens/corpus.hpp"
#include "lmens/detail/binary_io.hpp"
#include "lmens/detail/summation.hpp"
#include "lmens/error.hpp"
#include "lmens/probstream.hpp"

namespace lmens {

/// Modified Kneser-Ney discounts for one order: D1 for count 1, D2 for
/// count 2, D3plus for counts >= 3.
struct Discounts {
  double d1 = 0.5;
  double d2 = 0.5;
  double d3plus = 0.5;

  double operator()(std::uint32_t count) const {
    if (count == 0) return 0.0;
    if (count == 1) return d1;
    if (count == 2) return d2;
    return d3plus;
  }

  friend bool operator==(const Discounts&, const Discounts&) = default;
};

/// Closed-form discount estimates from counts-of-counts n1..n4. Degenerate
/// estimates (NaN, non-positive, or above k for Dk) fall back to Y, and Y
/// falls back to 0.5. Every discount is therefore in (0, k].
inline Discounts estimate_discounts(double n1, double n2, double n3, double n4) {
  double y = n1 / (n1 + 2.0 * n2);
  if (!(y > 0.0 && y <= 1.0)) y = 0.5;
  auto pick = [y](double d, double limit) { return (d > 0.0 && d <= limit) ? d : y; };
  Discounts d;
  d.d1 = pick(1.0 - 2.0 * y * n2 / n1, 1.0);
  d.d2 = pick(2.0 - 3.0 * y * n3 / n2, 2.0);
  d.d3plus = pick(3.0 - 4.0 * y * n4 / n3, 3.0);
  return d;
}

/// Interpolated modified Kneser-Ney language model of order 1..5.
///
/// The highest order keeps raw counts; lower orders keep continuation
/// counts (number of distinct left extensions), except n-grams that begin
/// with the sentence-start marker, which keep raw counts since they cannot
/// be extended. The unigram level is mixed with the uniform distribution:
///   P(w) = kUnigramLambda * P_kn(w) + (1 - kUnigramLambda) / V
/// so every vocabulary token has non-zero probability in every context.
class NgramModel {
 public:
  static constexpr int kMaxOrder = 5;
  static constexpr double kUnigramLambda = 0.999;

  using Key = std::array<TokenId, kMaxOrder>;
  static constexpr TokenId kNoToken = std::numeric_limits<TokenId>::max();

  struct ContextStats {
    std::uint64_t total = 0;
    std::uint32_t n1 = 0;
    std::uint32_t n2 = 0;
    std::uint32_t n3plus = 0;
  };

  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t h = 0x9E3779B97F4A7C15ULL;
      for (auto id : k) {
        h ^= id;
        h *= 0xBF58476D1CE4E5B9ULL;
        h ^= h >> 31;
      }
      return static_cast<std::size_t>(h);
    }
  };

  struct Level {
    std::unordered_map<Key, std::uint32_t, KeyHash> counts;  // (context..., token) -> count
    std::unordered_map<Key, ContextStats, KeyHash> contexts;  // context -> stats
    Discounts discounts;
  };

  NgramModel(int order, std::shared_ptr<const Vocabulary> vocab, std::vector<Level> levels)
      : order_(order), vocab_(std::move(vocab)), levels_(std::move(levels)) {
    if (order_ < 1 || order_ > kMaxOrder) {
      throw UsageError("n-gram order must be in [1, 5], got " + std::to_string(order_));
    }
    if (!vocab_) throw UsageError("n-gram model: null vocabulary");
    if (static_cast<int>(levels_.size()) != order_) {
      throw UsageError("n-gram model: level count does not match order");
    }
    rebuild_context_stats();
  }

  int order() const { return order_; }
  const Vocabulary& vocab() const { return *vocab_; }
  std::shared_ptr<const Vocabulary> shared_vocab() const { return vocab_; }
  /// Sentence-start padding marker; one past the last vocabulary id.
  TokenId bos_id() const { return static_cast<TokenId>(vocab_->size()); }
  const Level& level(int k) const { return levels_.at(static_cast<std::size_t>(k - 1)); }
  const Discounts& discounts(int k) const { return level(k).discounts; }

  /// P(token | context). Only the part of `context` after its last eos is
  /// used, left-padded with sentence-start markers.
  double prob(std::span<const TokenId> context, TokenId token) const {
    const auto v = vocab_->size();
    if (token >= v) throw UsageError("token id " + std::to_string(token) + " outside vocabulary");
    const auto eos = vocab_->eos_id();
    for (std::size_t i = context.size(); i-- > 0;) {
      if (context[i] == eos) {
        context = context.subspan(i + 1);
        break;
      }
    }
    const std::size_t hist = static_cast<std::size_t>(order_ - 1);
    std::array<TokenId, kMaxOrder> padded{};
    padded.fill(bos_id());
    const std::size_t take = std::min(hist, context.size());
    for (std::size_t i = 0; i < take; ++i) {
      const auto id = context[context.size() - take + i];
      if (id > v) throw UsageError("context id " + std::to_string(id) + " outside vocabulary");
      padded[hist - take + i] = id;
    }
    return prob_padded(std::span<const TokenId>(padded.data(), hist), token);
  }

  double logprob(std::span<const TokenId> context, TokenId token) const {
    return std::log(prob(context, token));
  }

  /// Binary dump: "LMKN", version, order, vocabulary, then per level its
  /// discounts and count table.
  std::string save() const {
    std::string out = "LMKN";
    detail::append_u32(out, kFormatVersion);
    detail::append_u32(out, static_cast<std::uint32_t>(order_));
    detail::append_u32(out, static_cast<std::uint32_t>(vocab_->size()));
    for (const auto& t : vocab_->tokens()) detail::append_string(out, t);
    for (int k = 1; k <= order_; ++k) {
      const auto& lvl = level(k);
      detail::append_f64(out, lvl.discounts.d1);
      detail::append_f64(out, lvl.discounts.d2);
      detail::append_f64(out, lvl.discounts.d3plus);
      // Sorted for byte-identical output across runs.
      std::vector<std::pair<Key, std::uint32_t>> entries(lvl.counts.begin(), lvl.counts.end());
      std::sort(entries.begin(), entries.end());
      detail::append_u64(out, entries.size());
      for (const auto& [key, count] : entries) {
        for (int i = 0; i < k; ++i) detail::append_u32(out, key[i]);
        detail::append_u32(out, count);
      }
    }
    return out;
  }

  static NgramModel load(std::string_view bytes) {
    detail::ByteReader in(bytes);
    if (in.take(4, "magic") != "LMKN") throw FormatError("bad magic: not an LMKN model");
    if (auto ver = in.u32("version"); ver != kFormatVersion) {
      throw FormatError("unsupported model version " + std::to_string(ver));
    }
    const auto order = static_cast<int>(in.u32("order"));
    if (order < 1 || order > kMaxOrder) throw FormatError("model order out of range");
    const auto v = in.u32("vocabulary size");
    std::vector<std::string> tokens;
    tokens.reserve(v);
    for (std::uint32_t i = 0; i < v; ++i) tokens.push_back(in.string("vocabulary token"));
    auto vocab = std::make_shared<const Vocabulary>(std::move(tokens));
    if (vocab->size() != v) throw FormatError("model vocabulary is not self-consistent");
    std::vector<Level> levels(static_cast<std::size_t>(order));
    for (int k = 1; k <= order; ++k) {
      auto& lvl = levels[static_cast<std::size_t>(k - 1)];
      lvl.discounts.d1 = in.f64("discount");
      lvl.discounts.d2 = in.f64("discount");
      lvl.discounts.d3plus = in.f64("discount");
      const auto n = in.u64("entry count");
      if (n > in.remaining() / (4u * (static_cast<std::uint64_t>(k) + 1))) {
        throw FormatError("truncated count table");
      }
      lvl.counts.reserve(n);
      for (std::uint64_t e = 0; e < n; ++e) {
        Key key;
        key.fill(kNoToken);
        for (int i = 0; i < k; ++i) {
          key[i] = in.u32("n-gram id");
          if (key[i] > v || (i == k - 1 && key[i] >= v)) throw FormatError("n-gram id out of range");
        }
        lvl.counts.emplace(key, in.u32("count"));
      }
    }
    if (in.remaining() != 0) throw FormatError("trailing bytes after model");
    return NgramModel(order, std::move(vocab), std::move(levels));
  }

 private:
  static constexpr std::uint32_t kFormatVersion = 1;

  static Key context_key(std::span<const TokenId> ctx) {
    Key key;
    key.fill(kNoToken);
    std::copy(ctx.begin(), ctx.end(), key.begin());
    return key;
  }

  // `history` holds exactly order-1 ids (padding included).
  double prob_padded(std::span<const TokenId> history, TokenId token) const {
    const double inv_v = 1.0 / static_cast<double>(vocab_->size());

    // Unigram level, backed off to uniform.
    double p = inv_v;
    {
      const auto& lvl = levels_[0];
      const auto& stats = unigram_stats_;
      if (stats.total > 0) {
        Key key;
        key.fill(kNoToken);
        key[0] = token;
        std::uint32_t c = 0;
        if (auto it = lvl.counts.find(key); it != lvl.counts.end()) c = it->second;
        const double total = static_cast<double>(stats.total);
        const double gamma = backoff_weight(lvl.discounts, stats);
        p = std::max(static_cast<double>(c) - lvl.discounts(c), 0.0) / total + gamma * inv_v;
      }
      p = kUnigramLambda * p + (1.0 - kUnigramLambda) * inv_v;
    }

    for (int k = 2; k <= order_; ++k) {
      const auto& lvl = levels_[static_cast<std::size_t>(k - 1)];
      const auto ctx = history.subspan(history.size() - static_cast<std::size_t>(k - 1));
      Key key = context_key(ctx);
      auto sit = lvl.contexts.find(key);
      if (sit == lvl.contexts.end()) continue;
      const auto& stats = sit->second;
      key[static_cast<std::size_t>(k - 1)] = token;
      std::uint32_t c = 0;
      if (auto it = lvl.counts.find(key); it != lvl.counts.end()) c = it->second;
      const double total = static_cast<double>(stats.total);
      p = std::max(static_cast<double>(c) - lvl.discounts(c), 0.0) / total +
          backoff_weight(lvl.discounts, stats) * p;
    }
    return p;
  }

  static double backoff_weight(const Discounts& d, const ContextStats& s) {
    return (d.d1 * s.n1 + d.d2 * s.n2 + d.d3plus * s.n3plus) / static_cast<double>(s.total);
  }

  void rebuild_context_stats() {
    unigram_stats_ = {};
    for (int k = 1; k <= order_; ++k) {
      auto& lvl = levels_[static_cast<std::size_t>(k - 1)];
      lvl.contexts.clear();
      for (const auto& [key, count] : lvl.counts) {
        ContextStats* s = &unigram_stats_;
        if (k > 1) {
          Key ctx = key;
          ctx[static_cast<std::size_t>(k - 1)] = kNoToken;
          s = &lvl.contexts[ctx];
        }
        s->total += count;
        if (count == 1) ++s->n1;
        else if (count == 2) ++s->n2;
        else if (count >= 3) ++s->n3plus;
      }
    }
  }

  int order_;
  std::shared_ptr<const Vocabulary> vocab_;
  std::vector<Level> levels_;
  ContextStats unigram_stats_;
};

namespace detail {

/// Calls fn(begin, end) for every eos-terminated sentence (the trailing
/// piece after the last eos counts as a sentence too).
template <class Fn>
void for_each_sentence(std::span<const TokenId> ids, TokenId eos, Fn&& fn) {
  std::size_t begin = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == eos) {
      fn(begin, i + 1);
      begin = i + 1;
    }
  }
  if (begin < ids.size()) fn(begin, ids.size());
}

}  // namespace detail

/// Counts n-grams with sentence-start padding (contexts never cross eos),
/// derives continuation counts and estimates per-order discounts.
inline NgramModel train(const Corpus& corpus, int order) {
  if (order < 1 || order > NgramModel::kMaxOrder) {
    throw UsageError("n-gram order must be in [1, 5], got " + std::to_string(order));
  }
  using Key = NgramModel::Key;
  const auto n = static_cast<std::size_t>(order);
  const auto bos = static_cast<TokenId>(corpus.vocab().size());
  const auto ids = corpus.token_ids();

  std::vector<NgramModel::Level> levels(n);
  // Raw counts of lower-order n-grams that start with the padding marker.
  std::vector<std::unordered_map<Key, std::uint32_t, NgramModel::KeyHash>> bos_raw(n);

  std::vector<TokenId> padded;
  detail::for_each_sentence(ids, corpus.vocab().eos_id(), [&](std::size_t b, std::size_t e) {
    padded.assign(n - 1, bos);
    padded.insert(padded.end(), ids.begin() + static_cast<std::ptrdiff_t>(b),
                  ids.begin() + static_cast<std::ptrdiff_t>(e));
    for (std::size_t t = n - 1; t < padded.size(); ++t) {
      Key key;
      key.fill(NgramModel::kNoToken);
      std::copy_n(padded.begin() + static_cast<std::ptrdiff_t>(t + 1 - n), n, key.begin());
      ++levels[n - 1].counts[key];
      for (std::size_t k = 1; k < n; ++k) {
        if (padded[t + 1 - k] != bos) continue;
        Key low;
        low.fill(NgramModel::kNoToken);
        std::copy_n(padded.begin() + static_cast<std::ptrdiff_t>(t + 1 - k), k, low.begin());
        ++bos_raw[k - 1][low];
      }
    }
  });

  // Continuation counts, top-down: each distinct (k+1)-gram contributes one
  // left extension to its k-gram suffix.
  for (std::size_t k = n - 1; k >= 1; --k) {
    auto& lower = levels[k - 1].counts;
    lower = bos_raw[k - 1];
    for (const auto& [key, count] : levels[k].counts) {
      if (key[1] == bos) continue;
      Key suffix;
      suffix.fill(NgramModel::kNoToken);
      std::copy_n(key.begin() + 1, k, suffix.begin());
      ++lower[suffix];
    }
  }

  for (auto& lvl : levels) {
    double nr[5] = {0, 0, 0, 0, 0};
    for (const auto& [key, count] : lvl.counts) {
      if (count <= 4) nr[count] += 1.0;
    }
    lvl.discounts = estimate_discounts(nr[1], nr[2], nr[3], nr[4]);
  }
  return NgramModel(order, corpus.shared_vocab(), std::move(levels));
}

/// One logprob per corpus token (eos included); context resets after eos.
/// Sentences are scored in parallel when `threads` > 1; output order and
/// values do not depend on the thread count.
inline ProbStream score_corpus(const NgramModel& model, const Corpus& corpus,
                               std::string model_name, std::size_t threads = 1) {
  if (!(model.vocab() == corpus.vocab())) {
    throw ValidationError("vocabulary mismatch between model and corpus '" + corpus.split_name() +
                          "'");
  }
  const auto ids = corpus.token_ids();
  std::vector<std::pair<std::size_t, std::size_t>> sentences;
  detail::for_each_sentence(ids, corpus.vocab().eos_id(),
                            [&](std::size_t b, std::size_t e) { sentences.emplace_back(b, e); });

  std::vector<double> logprobs(ids.size());
  detail::for_block_ranges(sentences.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t s = lo; s < hi; ++s) {
      const auto [b, e] = sentences[s];
      for (std::size_t i = b; i < e; ++i) {
        logprobs[i] = std::max(model.logprob(ids.subspan(b, i - b), ids[i]), kLogProbFloor);
      }
    }
  });
  return make_stream(std::move(model_name), corpus.split_name(), corpus.checksum(),
                     std::move(logprobs));
}

}  // namespace lmens
