#pragma once

// Sequence-accuracy metrics. Fixed-Acc pads both sides with the
// no-manipulation class to N_max and scores every slot; Adaptive-Acc pads
// only the shorter side, per pair, to the longer length. Aggregation of
// Adaptive-Acc is a global micro-average (sum of matches over sum of
// lengths); the per-pair macro mean is carried alongside for transparency.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vocab.hpp"

namespace seqtrace {

struct EvalPair {
  LabelSequence predicted;
  LabelSequence annotated;
};

struct MetricRow {
  size_t pairs = 0;
  double fixed_acc = 0.0;
  double adaptive_acc = 0.0;
  double gap = 0.0;                // fixed - adaptive
  size_t adaptive_matches = 0;     // micro numerator
  size_t adaptive_total = 0;       // micro denominator
};

struct EvalReport {
  double fixed_acc = 0.0;
  double adaptive_acc = 0.0;        // micro: sum(matches)/sum(L)
  double adaptive_acc_macro = 0.0;  // mean of per-pair fractions
  size_t pair_count = 0;
  std::map<std::string, MetricRow> per_type;    // keyed by annotated sequence
  std::map<int, MetricRow> per_length;          // keyed by annotated length
};

namespace detail {
inline void check_pair(const EvalPair& p, int n_max) {
  if (static_cast<int>(p.predicted.size()) > n_max ||
      static_cast<int>(p.annotated.size()) > n_max)
    throw std::runtime_error("sequence longer than N_max=" +
                             std::to_string(n_max));
}

inline int padded_at(const LabelSequence& s, size_t i, int nm) {
  return i < s.size() ? s[i] : nm;
}
}  // namespace detail

inline double fixed_acc(const std::vector<EvalPair>& pairs, int nm,
                        int n_max = kMaxSeqLen) {
  if (pairs.empty()) return 0.0;
  size_t matches = 0;
  for (const EvalPair& p : pairs) {
    detail::check_pair(p, n_max);
    for (int i = 0; i < n_max; ++i)
      if (detail::padded_at(p.predicted, static_cast<size_t>(i), nm) ==
          detail::padded_at(p.annotated, static_cast<size_t>(i), nm))
        matches++;
  }
  return static_cast<double>(matches) /
         (static_cast<double>(n_max) * static_cast<double>(pairs.size()));
}

// Per-pair matches and compare length. Both empty: exact prediction, scored
// as a full match of length 1 so a correct answer can never hurt.
inline std::pair<size_t, size_t> adaptive_counts(const EvalPair& p, int nm,
                                                 int n_max = kMaxSeqLen) {
  detail::check_pair(p, n_max);
  size_t len = std::max(p.predicted.size(), p.annotated.size());
  if (len == 0) return {1, 1};
  size_t matches = 0;
  for (size_t i = 0; i < len; ++i)
    if (detail::padded_at(p.predicted, i, nm) ==
        detail::padded_at(p.annotated, i, nm))
      matches++;
  return {matches, len};
}

inline double adaptive_acc(const std::vector<EvalPair>& pairs, int nm,
                           int n_max = kMaxSeqLen) {
  if (pairs.empty()) return 0.0;
  size_t matches = 0, total = 0;
  for (const EvalPair& p : pairs) {
    auto [m, l] = adaptive_counts(p, nm, n_max);
    matches += m;
    total += l;
  }
  return static_cast<double>(matches) / static_cast<double>(total);
}

inline std::string sequence_type_key(const LabelSequence& s,
                                     const Vocabulary& v) {
  if (s.empty()) return "original";
  std::string key;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) key += "-";
    key += v.name_of(s[i]);
  }
  return key;
}

inline EvalReport breakdown(const std::vector<EvalPair>& pairs,
                            const Vocabulary& v, int n_max = kMaxSeqLen) {
  EvalReport rep;
  rep.pair_count = pairs.size();
  if (pairs.empty()) return rep;
  int nm = v.nm();
  rep.fixed_acc = fixed_acc(pairs, nm, n_max);
  rep.adaptive_acc = adaptive_acc(pairs, nm, n_max);
  double macro = 0.0;
  for (const EvalPair& p : pairs) {
    auto [m, l] = adaptive_counts(p, nm, n_max);
    macro += static_cast<double>(m) / static_cast<double>(l);
  }
  rep.adaptive_acc_macro = macro / static_cast<double>(pairs.size());

  auto fill = [&](auto& table, auto key, const std::vector<EvalPair>& subset) {
    MetricRow row;
    row.pairs = subset.size();
    row.fixed_acc = fixed_acc(subset, nm, n_max);
    row.adaptive_acc = adaptive_acc(subset, nm, n_max);
    row.gap = row.fixed_acc - row.adaptive_acc;
    for (const EvalPair& p : subset) {
      auto [m, l] = adaptive_counts(p, nm, n_max);
      row.adaptive_matches += m;
      row.adaptive_total += l;
    }
    table[key] = row;
  };
  std::map<std::string, std::vector<EvalPair>> by_type;
  std::map<int, std::vector<EvalPair>> by_len;
  for (const EvalPair& p : pairs) {
    by_type[sequence_type_key(p.annotated, v)].push_back(p);
    by_len[static_cast<int>(p.annotated.size())].push_back(p);
  }
  for (const auto& [key, subset] : by_type) fill(rep.per_type, key, subset);
  for (const auto& [key, subset] : by_len) fill(rep.per_length, key, subset);
  return rep;
}

}  // namespace seqtrace
