#pragma once

// Generators for synthetic streams and corpora used across the test suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lmens/corpus.hpp"
#include "lmens/probstream.hpp"

namespace lmens::testing {

/// Checksum shared by all synthetic streams of a given length so they align.
inline Checksum synthetic_checksum(std::size_t n) {
  std::vector<TokenId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<TokenId>(i % 7);
  return checksum_ids(ids);
}

inline ProbStream stream_of(std::string name, std::vector<double> logprobs,
                            std::string split = "valid") {
  const auto n = logprobs.size();
  return make_stream(std::move(name), std::move(split), synthetic_checksum(n), std::move(logprobs));
}

/// Per-token logprobs roughly like a language model's: mostly in [-12, 0].
inline std::vector<double> random_logprobs(std::mt19937_64& rng, std::size_t n, double mean = 4.0,
                                           double spread = 2.0) {
  std::normal_distribution<double> d(mean, spread);
  std::vector<double> out(n);
  for (auto& v : out) v = -std::min(std::abs(d(rng)), 25.0);
  return out;
}

/// `base` plus independent Gaussian noise, kept at or below zero.
inline std::vector<double> perturbed(std::mt19937_64& rng, const std::vector<double>& base,
                                     double noise) {
  std::normal_distribution<double> d(0.0, noise);
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) out[i] = std::min(0.0, base[i] + d(rng));
  return out;
}

/// A pair of streams that disagree token by token, so the optimal mixture
/// is usually interior.
inline std::pair<std::vector<double>, std::vector<double>> random_pair(std::mt19937_64& rng,
                                                                       std::size_t n) {
  auto base = random_logprobs(rng, n);
  std::uniform_real_distribution<double> noise(0.5, 2.5);
  auto a = perturbed(rng, base, noise(rng));
  auto b = perturbed(rng, base, noise(rng));
  return {std::move(a), std::move(b)};
}

/// Text built from a fixed set of recurring phrases with 10% token noise:
/// long contexts are informative, so higher-order models do better.
inline std::string phrase_corpus_text(std::uint64_t seed, std::size_t n_tokens,
                                      std::size_t vocab_size = 80, std::size_t n_phrases = 150) {
  std::mt19937_64 phrase_rng(12345);
  std::uniform_int_distribution<std::size_t> word(0, vocab_size - 1);
  std::uniform_int_distribution<std::size_t> len(6, 10);
  std::vector<std::vector<std::size_t>> phrases(n_phrases);
  for (auto& p : phrases) {
    p.resize(len(phrase_rng));
    for (auto& w : p) w = word(phrase_rng);
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n_phrases - 1);
  std::bernoulli_distribution noisy(0.1);
  std::string out;
  std::size_t count = 0;
  while (count < n_tokens) {
    const auto& p = phrases[pick(rng)];
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (i) out += ' ';
      out += "w" + std::to_string(noisy(rng) ? word(rng) : p[i]);
    }
    out += '\n';
    count += p.size() + 1;
  }
  return out;
}

/// Uniformly random words, random sentence lengths.
inline std::string random_corpus_text(std::uint64_t seed, std::size_t n_tokens,
                                      std::size_t vocab_size) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> word(0, vocab_size - 1);
  std::uniform_int_distribution<std::size_t> len(1, 12);
  // Zipf-ish skew so counts-of-counts are non-degenerate.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::string out;
  std::size_t count = 0;
  while (count < n_tokens) {
    const auto l = len(rng);
    for (std::size_t i = 0; i < l; ++i) {
      if (i) out += ' ';
      const auto w = static_cast<std::size_t>(static_cast<double>(vocab_size) * std::pow(u(rng), 2.0));
      out += "t" + std::to_string(std::min(w, vocab_size - 1));
    }
    out += '\n';
    count += l + 1;
  }
  return out;
}

}  // namespace lmens::testing
