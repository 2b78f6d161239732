#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lmens/detail/text.hpp"
#include "lmens/error.hpp"
#include "lmens/mixer.hpp"
#include "lmens/probstream.hpp"

namespace lmens {

/// PP = e^H, H in nats/token.
inline double perplexity(double cross_entropy_nats) { return std::exp(cross_entropy_nats); }

struct EvalRow {
  std::string model_name;
  double weight = 0.0;
  double valid_cross_entropy = 0.0;
  double test_cross_entropy = 0.0;
  double valid_ppl = 0.0;
  double test_ppl = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  ///< in validation-stream order
  double ensemble_valid_cross_entropy = 0.0;
  double ensemble_test_cross_entropy = 0.0;
  double ensemble_valid_ppl = 0.0;
  double ensemble_test_ppl = 0.0;
  std::string best_single_model;  ///< lowest test perplexity
  double improvement_pct = 0.0;   ///< vs best single model, on test

  /// Ensemble validation PP within `rel_tol` of, or below, every single model.
  bool no_harm(double rel_tol = 1e-6) const {
    for (const auto& r : rows) {
      if (ensemble_valid_ppl > r.valid_ppl * (1.0 + rel_tol)) return false;
    }
    return true;
  }
};

namespace detail {

inline std::vector<const ProbStream*> order_by_names(const std::vector<std::string>& names,
                                                     std::span<const ProbStream> streams,
                                                     const char* split) {
  std::map<std::string, const ProbStream*> by_name;
  for (const auto& s : streams) {
    if (!by_name.emplace(s.header.model_name, &s).second) {
      throw ValidationError(std::string("duplicate model '") + s.header.model_name + "' in " +
                            split + " streams");
    }
  }
  if (by_name.size() != names.size()) {
    throw ValidationError(std::string("model set mismatch: weights name ") +
                          std::to_string(names.size()) + " models, " + split + " has " +
                          std::to_string(by_name.size()));
  }
  std::vector<const ProbStream*> out;
  for (const auto& n : names) {
    auto it = by_name.find(n);
    if (it == by_name.end()) {
      throw ValidationError("model set mismatch: '" + n + "' has no " + split + " stream");
    }
    out.push_back(it->second);
  }
  return out;
}

inline double mixture_cross_entropy(const EnsembleWeights& w,
                                    const std::vector<const ProbStream*>& streams,
                                    std::size_t threads) {
  Columns cols;
  for (const auto* s : streams) cols.emplace_back(s->logprobs);
  return evaluate_objective(w.log_weights(), cols, false, threads).cross_entropy;
}

}  // namespace detail

/// Per-model and ensemble perplexities. The weights are applied unchanged to
/// the test split; nothing is fitted here.
inline EvalReport evaluate(const EnsembleWeights& weights, std::span<const ProbStream> valid,
                           std::span<const ProbStream> test, std::size_t threads = 1) {
  if (valid.empty()) throw UsageError("evaluate: no streams");
  require_mutual_alignment(valid);
  require_mutual_alignment(test);
  const auto& names = weights.model_names();
  const auto valid_sorted = detail::order_by_names(names, valid, "valid");
  const auto test_sorted = detail::order_by_names(names, test, "test");

  std::map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < names.size(); ++j) index[names[j]] = j;

  EvalReport r;
  for (const auto& s : valid) {
    const auto j = index.at(s.header.model_name);
    EvalRow row;
    row.model_name = s.header.model_name;
    row.weight = weights.weights()[j];
    row.valid_cross_entropy = s.cross_entropy();
    row.test_cross_entropy = test_sorted[j]->cross_entropy();
    row.valid_ppl = perplexity(row.valid_cross_entropy);
    row.test_ppl = perplexity(row.test_cross_entropy);
    r.rows.push_back(std::move(row));
  }
  r.ensemble_valid_cross_entropy = detail::mixture_cross_entropy(weights, valid_sorted, threads);
  r.ensemble_test_cross_entropy = detail::mixture_cross_entropy(weights, test_sorted, threads);
  r.ensemble_valid_ppl = perplexity(r.ensemble_valid_cross_entropy);
  r.ensemble_test_ppl = perplexity(r.ensemble_test_cross_entropy);

  const auto best = std::min_element(r.rows.begin(), r.rows.end(), [](const auto& a, const auto& b) {
    return a.test_ppl < b.test_ppl;
  });
  r.best_single_model = best->model_name;
  r.improvement_pct = 100.0 * (best->test_ppl - r.ensemble_test_ppl) / best->test_ppl;
  return r;
}

/// Aligned text table: model, weight, validation and test perplexity, with
/// the ensemble row last. Numbers are shown to two decimals.
inline std::string render_table(const EvalReport& r) {
  std::size_t name_w = std::string_view("Ensemble").size();
  for (const auto& row : r.rows) name_w = std::max(name_w, row.model_name.size());
  auto pad = [](std::string s, std::size_t w, bool right) {
    if (s.size() < w) {
      if (right) s.insert(0, w - s.size(), ' ');
      else s.append(w - s.size(), ' ');
    }
    return s;
  };
  auto line = [&](const std::string& name, const std::string& w, const std::string& v,
                  const std::string& t) {
    return pad(name, name_w, false) + " | " + pad(w, 6, true) + " | " + pad(v, 10, true) + " | " +
           pad(t, 10, true) + "\n";
  };
  std::string rule(name_w + 3 + 6 + 3 + 10 + 3 + 10, '-');
  std::string out = line("Model", "Weight", "Validation", "Test");
  out += rule + "\n";
  for (const auto& row : r.rows) {
    out += line(row.model_name, detail::format_fixed(row.weight, 2),
                detail::format_fixed(row.valid_ppl, 2), detail::format_fixed(row.test_ppl, 2));
  }
  out += rule + "\n";
  out += line("Ensemble", "1", detail::format_fixed(r.ensemble_valid_ppl, 2),
              detail::format_fixed(r.ensemble_test_ppl, 2));
  out += "improvement over best single model (" + r.best_single_model +
         ", test): " + detail::format_fixed(r.improvement_pct, 2) + "%\n";
  return out;
}

/// Machine-readable report: tab-separated, full precision, header row,
/// one row per model, trailing ensemble and improvement rows.
inline std::string format_report_tsv(const EvalReport& r) {
  using detail::format_g17;
  std::string out = "model\tweight\tvalid_ppl\ttest_ppl\n";
  for (const auto& row : r.rows) {
    out += row.model_name + "\t" + format_g17(row.weight) + "\t" + format_g17(row.valid_ppl) + "\t" +
           format_g17(row.test_ppl) + "\n";
  }
  out += "ensemble\t1\t" + format_g17(r.ensemble_valid_ppl) + "\t" +
         format_g17(r.ensemble_test_ppl) + "\n";
  out += "improvement_pct\t" + format_g17(r.improvement_pct) + "\n";
  return out;
}

}  // namespace lmens
