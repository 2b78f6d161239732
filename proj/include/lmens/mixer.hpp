#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmens/detail/summation.hpp"
#include "lmens/detail/text.hpp"
#include "lmens/error.hpp"
#include "lmens/probstream.hpp"

namespace lmens {

/// Optimizer settings; names match the `fit` command-line flags.
struct FitConfig {
  std::size_t max_iterations = 10000;
  double tol = 1e-10;              ///< |dH| between accepted steps, nats/token
  double armijo_c = 1e-4;
  double initial_step = 1.0;
  double boundary_epsilon = 1e-6;  ///< stop once max weight > 1 - epsilon
  std::size_t threads = 1;         ///< worker cap; never changes results
};

namespace detail {

/// log-sum-exp over a small vector.
inline double log_sum_exp(std::span<const double> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// A point on the simplex, always derived as softmax(logits).
class EnsembleWeights {
 public:
  EnsembleWeights(std::vector<std::string> model_names, std::vector<double> logits)
      : names_(std::move(model_names)), logits_(std::move(logits)) {
    if (names_.empty()) throw UsageError("ensemble needs at least one model");
    if (names_.size() != logits_.size()) {
      throw UsageError("ensemble: " + std::to_string(names_.size()) + " names but " +
                       std::to_string(logits_.size()) + " logits");
    }
    for (double a : logits_) {
      if (!std::isfinite(a)) throw ValidationError("ensemble: non-finite logit");
    }
    const double lse = detail::log_sum_exp(logits_);
    log_weights_.resize(logits_.size());
    weights_.resize(logits_.size());
    for (std::size_t j = 0; j < logits_.size(); ++j) {
      log_weights_[j] = logits_[j] - lse;
      weights_[j] = std::exp(log_weights_[j]);
    }
  }

  static EnsembleWeights uniform(std::vector<std::string> model_names) {
    const auto k = model_names.size();
    return EnsembleWeights(std::move(model_names), std::vector<double>(k, 0.0));
  }

  /// Logits ln(w_j); weights need only be positive, they are renormalised.
  static EnsembleWeights from_weights(std::vector<std::string> model_names,
                                      std::span<const double> weights) {
    std::vector<double> logits;
    logits.reserve(weights.size());
    for (double w : weights) {
      if (!(w > 0.0) || !std::isfinite(w)) {
        throw ValidationError("ensemble weights must be positive and finite");
      }
      logits.push_back(std::log(w));
    }
    return EnsembleWeights(std::move(model_names), std::move(logits));
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& model_names() const { return names_; }
  std::span<const double> logits() const { return logits_; }
  std::span<const double> weights() const { return weights_; }
  std::span<const double> log_weights() const { return log_weights_; }

 private:
  std::vector<std::string> names_;
  std::vector<double> logits_;
  std::vector<double> log_weights_;
  std::vector<double> weights_;
};

/// ln sum_j m_j exp(lp_j), evaluated as log-sum-exp of ln m_j + lp_j.
inline double mixture_logprob(const EnsembleWeights& weights, std::span<const double> logprobs) {
  if (logprobs.size() != weights.size()) {
    throw UsageError("mixture_logprob: expected " + std::to_string(weights.size()) +
                     " logprobs, got " + std::to_string(logprobs.size()));
  }
  const auto lw = weights.log_weights();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < lw.size(); ++j) mx = std::max(mx, lw[j] + logprobs[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < lw.size(); ++j) s += std::exp(lw[j] + logprobs[j] - mx);
  return mx + std::log(s);
}

namespace detail {

using Columns = std::vector<std::span<const double>>;

inline Columns columns_of(std::span<const ProbStream> streams) {
  Columns cols;
  cols.reserve(streams.size());
  for (const auto& s : streams) cols.emplace_back(s.logprobs);
  return cols;
}

struct Objective {
  double cross_entropy = 0.0;
  std::vector<double> simplex_gradient;  ///< dH/dm_j
};

/// Cross-entropy of the mixture and, optionally, its gradient with respect
/// to the simplex coordinates: g_j = -(1/N) sum_i P_j(i) / P_mix(i).
inline Objective evaluate_objective(std::span<const double> log_weights, const Columns& cols,
                                    bool with_gradient, std::size_t threads) {
  const std::size_t k = cols.size();
  const std::size_t n = cols.front().size();
  const std::size_t width = with_gradient ? k + 1 : 1;
  auto sums = blocked_sum(n, width, threads, [&](std::size_t b, std::size_t e,
                                                 std::span<double> acc) {
    std::vector<double> x(k);
    for (std::size_t i = b; i < e; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        x[j] = log_weights[j] + cols[j][i];
        mx = std::max(mx, x[j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - mx);
      const double mix = mx + std::log(s);
      acc[0] += mix;
      if (with_gradient) {
        for (std::size_t j = 0; j < k; ++j) acc[1 + j] += std::exp(cols[j][i] - mix);
      }
    }
  });
  Objective out;
  const double nd = static_cast<double>(n);
  out.cross_entropy = -sums[0] / nd;
  if (with_gradient) {
    out.simplex_gradient.resize(k);
    for (std::size_t j = 0; j < k; ++j) out.simplex_gradient[j] = -sums[1 + j] / nd;
  }
  return out;
}

/// Chain rule through softmax: dH/da_j = m_j (g_j - sum_k m_k g_k).
inline std::vector<double> logit_gradient(std::span<const double> weights,
                                          std::span<const double> simplex_gradient) {
  double mean = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) mean += weights[j] * simplex_gradient[j];
  std::vector<double> g(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j) g[j] = weights[j] * (simplex_gradient[j] - mean);
  return g;
}

inline void center(std::vector<double>& logits) {
  const double mean = std::accumulate(logits.begin(), logits.end(), 0.0) /
                      static_cast<double>(logits.size());
  for (auto& a : logits) a -= mean;
}

inline void check_columns(const Columns& cols, std::size_t expected_k) {
  if (cols.empty()) throw UsageError("empty stream list");
  if (cols.size() != expected_k) {
    throw UsageError("expected " + std::to_string(expected_k) + " streams, got " +
                     std::to_string(cols.size()));
  }
  if (cols.front().empty()) throw ValidationError("streams are empty");
}

}  // namespace detail

/// H(W) = -(1/N) sum_i ln P_mix(w_i), in nats/token.
inline double cross_entropy(const EnsembleWeights& weights, std::span<const ProbStream> streams,
                            std::size_t threads = 1) {
  require_mutual_alignment(streams);
  auto cols = detail::columns_of(streams);
  detail::check_columns(cols, weights.size());
  return detail::evaluate_objective(weights.log_weights(), cols, false, threads).cross_entropy;
}

/// dH/d(logits) under the softmax parameterisation.
inline std::vector<double> gradient(const EnsembleWeights& weights,
                                    std::span<const ProbStream> streams, std::size_t threads = 1) {
  require_mutual_alignment(streams);
  auto cols = detail::columns_of(streams);
  detail::check_columns(cols, weights.size());
  auto obj = detail::evaluate_objective(weights.log_weights(), cols, true, threads);
  return detail::logit_gradient(weights.weights(), obj.simplex_gradient);
}

enum class StopReason { converged, max_iterations, boundary_saturated };

inline std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::converged: return "converged";
    case StopReason::max_iterations: return "max-iterations";
    case StopReason::boundary_saturated: return "boundary-saturated";
  }
  return "unknown";
}

struct TracePoint {
  std::size_t iteration = 0;
  double cross_entropy = 0.0;
};

struct FitResult {
  EnsembleWeights weights;
  double valid_cross_entropy = 0.0;
  std::vector<TracePoint> trace;
  StopReason stop_reason = StopReason::converged;
  std::size_t iterations = 0;
};

namespace detail {

/// Logit gap used to represent a simplex vertex: the other weights come out
/// near exp(-700), positive but numerically invisible next to 1.
inline constexpr double kVertexLogitGap = 700.0;

inline constexpr double kMaxStep = 1e12;

inline std::vector<double> vertex_logits(std::size_t k, std::size_t j) {
  std::vector<double> a(k, -kVertexLogitGap);
  a[j] = 0.0;
  center(a);
  return a;
}

inline FitResult fit_columns(const Columns& cols, std::vector<std::string> names,
                             const FitConfig& cfg) {
  if (cols.empty()) throw UsageError("empty stream list");
  check_columns(cols, names.size());
  if (!(cfg.initial_step > 0.0) || !(cfg.armijo_c > 0.0 && cfg.armijo_c < 1.0) ||
      !(cfg.boundary_epsilon > 0.0 && cfg.boundary_epsilon < 1.0) || !(cfg.tol >= 0.0)) {
    throw UsageError("invalid fit configuration");
  }
  const std::size_t k = cols.size();
  const std::size_t threads = cfg.threads;

  EnsembleWeights w(names, std::vector<double>(k, 0.0));
  auto obj = evaluate_objective(w.log_weights(), cols, k > 1, threads);
  double h = obj.cross_entropy;
  FitResult result{w, h, {{0, h}}, StopReason::converged, 0};
  if (k == 1) return result;

  auto grad = logit_gradient(w.weights(), obj.simplex_gradient);
  StopReason stop = StopReason::max_iterations;
  // Each search starts from twice the previous accepted step, so the step
  // can grow where H flattens out near the boundary.
  double next_step = cfg.initial_step;
  std::size_t it = 0;
  while (it < cfg.max_iterations) {
    if (*std::max_element(w.weights().begin(), w.weights().end()) > 1.0 - cfg.boundary_epsilon) {
      stop = StopReason::boundary_saturated;
      break;
    }
    double gnorm2 = 0.0;
    for (double g : grad) gnorm2 += g * g;
    if (gnorm2 == 0.0) {
      stop = StopReason::converged;
      break;
    }

    // Backtracking line search along -grad, halving until Armijo holds.
    double step = next_step;
    bool accepted = false;
    std::vector<double> cand(k);
    double h_cand = h;
    for (int halvings = 0; halvings < 200; ++halvings, step *= 0.5) {
      for (std::size_t j = 0; j < k; ++j) cand[j] = w.logits()[j] - step * grad[j];
      center(cand);
      EnsembleWeights trial(names, cand);
      h_cand = evaluate_objective(trial.log_weights(), cols, false, threads).cross_entropy;
      if (h_cand <= h - cfg.armijo_c * step * gnorm2) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No representable step decreases H: numerically stationary.
      stop = StopReason::converged;
      break;
    }

    ++it;
    next_step = std::min(2.0 * step, kMaxStep);
    const double dh = h - h_cand;
    w = EnsembleWeights(names, cand);
    obj = evaluate_objective(w.log_weights(), cols, true, threads);
    h = obj.cross_entropy;
    grad = logit_gradient(w.weights(), obj.simplex_gradient);
    result.trace.push_back({it, h});
    if (std::abs(dh) < cfg.tol) {
      stop = StopReason::converged;
      break;
    }
  }

  // Every vertex is feasible; never report an ensemble worse than the best
  // single member.
  std::size_t best = 0;
  double best_h = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    const Columns single{cols[j]};
    const double hj = evaluate_objective(std::vector<double>{0.0}, single, false, threads)
                          .cross_entropy;
    if (hj < best_h) {
      best_h = hj;
      best = j;
    }
  }
  if (best_h < h) {
    EnsembleWeights vertex(names, vertex_logits(k, best));
    const double hv = evaluate_objective(vertex.log_weights(), cols, false, threads).cross_entropy;
    if (hv < h) {
      w = std::move(vertex);
      h = hv;
      ++it;
      result.trace.push_back({it, h});
      stop = StopReason::boundary_saturated;
    }
  }

  result.weights = std::move(w);
  result.valid_cross_entropy = h;
  result.stop_reason = stop;
  result.iterations = it;
  return result;
}

inline std::vector<std::string> names_of(std::span<const ProbStream> streams) {
  std::vector<std::string> names;
  for (const auto& s : streams) names.push_back(s.header.model_name);
  return names;
}

}  // namespace detail

/// Minimises validation cross-entropy over the simplex by gradient descent
/// on softmax logits, starting from uniform weights.
inline FitResult fit(std::span<const ProbStream> streams, const FitConfig& config = {}) {
  if (streams.empty()) throw UsageError("empty stream list");
  require_mutual_alignment(streams);
  return detail::fit_columns(detail::columns_of(streams), detail::names_of(streams), config);
}

struct LeaveOneOutEntry {
  std::string model_name;
  FitResult without;    ///< fit on the other K-1 streams
  double delta_h = 0.0; ///< H_without - H_full; > 0 means the model helps
};

struct LeaveOneOutReport {
  FitResult full;
  std::vector<LeaveOneOutEntry> entries;
};

inline LeaveOneOutReport fit_leave_one_out(std::span<const ProbStream> streams,
                                           const FitConfig& config = {}) {
  if (streams.size() < 2) throw UsageError("leave-one-out needs at least two streams");
  require_mutual_alignment(streams);
  const auto cols = detail::columns_of(streams);
  const auto names = detail::names_of(streams);
  LeaveOneOutReport report{detail::fit_columns(cols, names, config), {}};
  for (std::size_t j = 0; j < streams.size(); ++j) {
    detail::Columns sub;
    std::vector<std::string> sub_names;
    for (std::size_t i = 0; i < streams.size(); ++i) {
      if (i == j) continue;
      sub.push_back(cols[i]);
      sub_names.push_back(names[i]);
    }
    auto without = detail::fit_columns(sub, std::move(sub_names), config);
    report.entries.push_back({names[j], std::move(without), 0.0});
  }
  // A sub-fit that stopped closer to its optimum than the full fit did is a
  // feasible full-ensemble point once model j is re-inserted at negligible
  // weight; keep whichever is lower so that no delta comes out negative.
  auto& full = report.full;
  for (std::size_t j = 0; j < report.entries.size(); ++j) {
    const auto& without = report.entries[j].without;
    if (!(without.valid_cross_entropy < full.valid_cross_entropy)) continue;
    std::vector<double> logits(without.weights.logits().begin(), without.weights.logits().end());
    const double low = *std::min_element(logits.begin(), logits.end()) - detail::kVertexLogitGap;
    logits.insert(logits.begin() + static_cast<std::ptrdiff_t>(j), low);
    EnsembleWeights embedded(names, logits);
    const double h = detail::evaluate_objective(embedded.log_weights(), cols, false, config.threads)
                         .cross_entropy;
    if (h < full.valid_cross_entropy) {
      full.weights = std::move(embedded);
      full.valid_cross_entropy = h;
      full.iterations += 1;
      full.trace.push_back({full.iterations, h});
    }
  }
  for (auto& e : report.entries) e.delta_h = e.without.valid_cross_entropy - full.valid_cross_entropy;
  return report;
}

struct AddModelReport {
  FitResult before;
  FitResult after;
  double new_weight = 0.0;
  double h_before = 0.0;
  double h_after = 0.0;
  double delta_h = 0.0;         ///< h_before - h_after
  double delta_ppl_pct = 0.0;   ///< 100 (PP_before - PP_after) / PP_before
};

/// Refits with `new_stream` appended. The previous optimum (with the new
/// model at negligible weight) is always a candidate, so H never increases.
inline AddModelReport add_model(std::span<const ProbStream> existing, const ProbStream& new_stream,
                                const FitConfig& config = {}) {
  if (existing.empty()) throw UsageError("add: no existing streams");
  require_mutual_alignment(existing);
  require_aligned(existing.front().header, new_stream.header);

  auto cols = detail::columns_of(existing);
  auto names = detail::names_of(existing);
  for (const auto& n : names) {
    if (n == new_stream.header.model_name) {
      throw ValidationError("add: model name '" + n + "' already in the ensemble");
    }
  }

  auto before = detail::fit_columns(cols, names, config);
  cols.emplace_back(new_stream.logprobs);
  names.push_back(new_stream.header.model_name);
  AddModelReport r{std::move(before), detail::fit_columns(cols, names, config)};

  if (r.after.valid_cross_entropy > r.before.valid_cross_entropy) {
    std::vector<double> logits(r.before.weights.logits().begin(), r.before.weights.logits().end());
    // Not re-centred: the existing logits stay bit-identical, so H matches
    // the previous fit exactly.
    logits.push_back(*std::min_element(logits.begin(), logits.end()) - detail::kVertexLogitGap);
    EnsembleWeights embedded(names, logits);
    const double h = detail::evaluate_objective(embedded.log_weights(), cols, false, config.threads)
                         .cross_entropy;
    if (h <= r.before.valid_cross_entropy) {
      r.after.weights = std::move(embedded);
      r.after.valid_cross_entropy = h;
      r.after.trace.push_back({r.after.iterations + 1, h});
      r.after.iterations += 1;
    }
  }

  r.new_weight = r.after.weights.weights().back();
  r.h_before = r.before.valid_cross_entropy;
  r.h_after = r.after.valid_cross_entropy;
  r.delta_h = r.h_before - r.h_after;
  const double pp_before = std::exp(r.h_before);
  const double pp_after = std::exp(r.h_after);
  r.delta_ppl_pct = 100.0 * (pp_before - pp_after) / pp_before;
  return r;
}

/// Plain-text key:value report of a fit.
inline std::string format_fit_report(const FitResult& r) {
  std::string out;
  out += "models: " + std::to_string(r.weights.size()) + "\n";
  out += "valid_cross_entropy: " + detail::format_g17(r.valid_cross_entropy) + "\n";
  out += "valid_perplexity: " + detail::format_fixed(std::exp(r.valid_cross_entropy), 2) + "\n";
  out += "iterations: " + std::to_string(r.iterations) + "\n";
  out += "stop_reason: " + std::string(to_string(r.stop_reason)) + "\n";
  for (std::size_t j = 0; j < r.weights.size(); ++j) {
    out += "weight[" + r.weights.model_names()[j] +
           "]: " + detail::format_fixed(r.weights.weights()[j], 6) + "\n";
  }
  return out;
}

inline std::string format_trace(const FitResult& r) {
  std::string out = "iteration\tcross_entropy\n";
  for (const auto& p : r.trace) {
    out += std::to_string(p.iteration) + "\t" + detail::format_g17(p.cross_entropy) + "\n";
  }
  return out;
}

/// Weights file: "<model_name> <weight, 6 decimals> <logit, full precision>"
/// per line. The logit column lets a reader rebuild the weights exactly.
inline std::string format_weights_file(const EnsembleWeights& w) {
  std::string out;
  for (std::size_t j = 0; j < w.size(); ++j) {
    out += w.model_names()[j] + " " + detail::format_fixed(w.weights()[j], 6) + " " +
           detail::format_g17(w.logits()[j]) + "\n";
  }
  return out;
}

/// Reads the weights file. Lines with only "<name> <weight>" are accepted
/// and turned into logits ln(weight).
inline EnsembleWeights parse_weights_file(std::string_view text) {
  std::vector<std::string> names;
  std::vector<double> logits;
  std::vector<double> weights;
  bool all_have_logits = true;
  for (auto line : detail::split_lines(text)) {
    auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto fields = detail::split_whitespace(t);
    if (fields.size() < 2) throw FormatError("weights file: malformed line '" + std::string(t) + "'");
    // The name may itself contain spaces; numeric columns are at the end.
    std::size_t numeric = 1;
    double logit = 0.0;
    if (fields.size() >= 3) {
      auto a = detail::parse_double(fields.back());
      auto b = detail::parse_double(fields[fields.size() - 2]);
      if (a && b) {
        numeric = 2;
        logit = *a;
      }
    }
    auto wv = detail::parse_double(fields[fields.size() - numeric]);
    if (!wv) throw FormatError("weights file: malformed weight in '" + std::string(t) + "'");
    all_have_logits = all_have_logits && numeric == 2;
    const auto name_end = fields[fields.size() - numeric - 1];
    names.emplace_back(t.substr(0, static_cast<std::size_t>(name_end.data() + name_end.size() - t.data())));
    weights.push_back(*wv);
    logits.push_back(logit);
  }
  if (names.empty()) throw FormatError("weights file: no entries");
  if (all_have_logits) return EnsembleWeights(std::move(names), std::move(logits));
  return EnsembleWeights::from_weights(std::move(names), weights);
}

}  // namespace lmens
