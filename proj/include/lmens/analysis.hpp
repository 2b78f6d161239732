#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmens/corpus.hpp"
#include "lmens/detail/text.hpp"
#include "lmens/error.hpp"
#include "lmens/probstream.hpp"

namespace lmens {

/// Per-position comparison of the observed-token probability across models.
struct DivergenceRecord {
  std::size_t position = 0;
  std::string token;
  std::vector<std::string> context_window;  ///< up to `width` tokens each side
  std::vector<double> per_model_prob;       ///< exp(logprob), stream order
  double spread = 0.0;                      ///< max - min of per_model_prob
  std::string leader;                       ///< argmax; ties -> smallest name
};

namespace detail {

inline void require_analysis_inputs(std::span<const ProbStream> streams, const Corpus& corpus) {
  if (streams.size() < 2) throw UsageError("analysis needs at least two streams");
  for (const auto& s : streams) require_alignment(s, corpus);
}

inline DivergenceRecord make_record(std::span<const ProbStream> streams, const Corpus& corpus,
                                    std::size_t pos, std::size_t width) {
  DivergenceRecord rec;
  rec.position = pos;
  rec.token = corpus.token(pos);
  const std::size_t lo = pos >= width ? pos - width : 0;
  const std::size_t hi = std::min(corpus.size(), pos + width + 1);
  for (std::size_t i = lo; i < hi; ++i) {
    if (i != pos) rec.context_window.push_back(corpus.token(i));
  }
  rec.per_model_prob.reserve(streams.size());
  std::size_t lead = 0;
  double mn = 2.0;
  for (std::size_t j = 0; j < streams.size(); ++j) {
    const double p = std::exp(streams[j].logprobs[pos]);
    rec.per_model_prob.push_back(p);
    mn = std::min(mn, p);
    const double best = rec.per_model_prob[lead];
    if (p > best || (p == best && streams[j].header.model_name < streams[lead].header.model_name)) {
      lead = j;
    }
  }
  rec.spread = rec.per_model_prob[lead] - mn;
  rec.leader = streams[lead].header.model_name;
  return rec;
}

}  // namespace detail

/// Positions with the largest max-min probability spread, ordered by
/// descending spread then ascending position.
inline std::vector<DivergenceRecord> rank_divergences(std::span<const ProbStream> streams,
                                                      const Corpus& corpus, std::size_t top_n,
                                                      std::size_t context_width = 5) {
  detail::require_analysis_inputs(streams, corpus);
  const std::size_t n = corpus.size();
  std::vector<std::pair<double, std::size_t>> spreads(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1.0;
    double mn = 2.0;
    for (const auto& s : streams) {
      const double p = std::exp(s.logprobs[i]);
      mx = std::max(mx, p);
      mn = std::min(mn, p);
    }
    spreads[i] = {mx - mn, i};
  }
  const std::size_t keep = std::min(top_n, n);
  auto by_rank = [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  };
  std::partial_sort(spreads.begin(), spreads.begin() + static_cast<std::ptrdiff_t>(keep),
                    spreads.end(), by_rank);
  std::vector<DivergenceRecord> out;
  out.reserve(keep);
  for (std::size_t r = 0; r < keep; ++r) {
    out.push_back(detail::make_record(streams, corpus, spreads[r].second, context_width));
  }
  return out;
}

/// One record per position in [start, end).
inline std::vector<DivergenceRecord> sentence_profile(std::span<const ProbStream> streams,
                                                      const Corpus& corpus, std::size_t start,
                                                      std::size_t end,
                                                      std::size_t context_width = 0) {
  detail::require_analysis_inputs(streams, corpus);
  if (!(start < end && end <= corpus.size())) {
    throw UsageError("profile range [" + std::to_string(start) + ", " + std::to_string(end) +
                     ") out of bounds for " + std::to_string(corpus.size()) + " tokens");
  }
  std::vector<DivergenceRecord> out;
  out.reserve(end - start);
  for (std::size_t i = start; i < end; ++i) {
    out.push_back(detail::make_record(streams, corpus, i, context_width));
  }
  return out;
}

namespace detail {

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace detail

/// CSV: position, token, spread, leader, then one probability column per
/// model (stream order). Probabilities use 17 significant digits.
inline std::string format_divergence_csv(std::span<const ProbStream> streams,
                                         std::span<const DivergenceRecord> records) {
  std::string out = "position,token,spread,leader";
  for (const auto& s : streams) out += "," + detail::csv_field(s.header.model_name);
  out += "\n";
  for (const auto& r : records) {
    out += std::to_string(r.position) + "," + detail::csv_field(r.token) + "," +
           detail::format_g17(r.spread) + "," + detail::csv_field(r.leader);
    for (double p : r.per_model_prob) out += "," + detail::format_g17(p);
    out += "\n";
  }
  return out;
}

}  // namespace lmens
