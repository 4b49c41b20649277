#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "clozepet/corpus.hpp"
#include "clozepet/error.hpp"
#include "clozepet/model.hpp"
#include "clozepet/rng.hpp"
#include "clozepet/train.hpp"
#include "clozepet/vocab.hpp"

#include "json.hpp"

namespace clozepet {

// Value of a coalition: called with one flag per feature group.
using ValueFn = std::function<double(const std::vector<bool>&)>;

struct FeatureGroup {
  std::string text;
  std::size_t start = 0, end = 0;  // token span [start, end) in the encoded sequence
};

struct FeatureGrouping {
  std::vector<FeatureGroup> groups;

  void validate() const {
    if (groups.empty()) throw Error(ErrorCode::InvalidConfig, "no feature groups");
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (groups[i].start >= groups[i].end) {
        throw Error(ErrorCode::InvalidConfig, "empty feature group span");
      }
      if (i > 0 && groups[i].start < groups[i - 1].end) {
        throw Error(ErrorCode::InvalidConfig, "feature groups overlap or are unordered");
      }
    }
  }
};

struct Attribution {
  double base_value = 0.0;
  std::vector<double> phi;
  std::vector<double> stderrs;  // empty for the exact method
  std::string method;           // "exact" or "sampled"
  std::uint64_t n_permutations = 0;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Exact Shapley values by enumerating all 2^n coalitions. Each coalition
// value is computed once; phi_i sums the weighted marginals
// |S|! (n-|S|-1)! / n! over coalitions S not containing i.
inline Attribution shapley_exact(const ValueFn& f, std::size_t n) {
  if (n == 0) throw Error(ErrorCode::InvalidConfig, "need at least one group");
  if (n > 15) {
    throw Error(ErrorCode::TooManyGroups,
                std::to_string(n) + " groups exceed the exact-enumeration limit of 15");
  }
  const std::size_t total = std::size_t{1} << n;
  std::vector<double> value(total);
  std::vector<bool> present(n);
  for (std::size_t mask = 0; mask < total; ++mask) {
    for (std::size_t i = 0; i < n; ++i) present[i] = (mask >> i) & 1u;
    value[mask] = f(present);
  }
  std::vector<double> fact(n + 1, 1.0);
  for (std::size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  Attribution a;
  a.method = "exact";
  a.base_value = value[0];
  a.phi.assign(n, 0.0);
  for (std::size_t mask = 0; mask < total; ++mask) {
    std::size_t s = static_cast<std::size_t>(__builtin_popcountll(mask));
    for (std::size_t i = 0; i < n; ++i) {
      if ((mask >> i) & 1u) continue;
      double w = fact[s] * fact[n - s - 1] / fact[n];
      a.phi[i] += w * (value[mask | (std::size_t{1} << i)] - value[mask]);
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Permutation-sampling estimate. When the permutation budget covers all
// n! orderings the full set is enumerated instead, which reproduces the
// exact values. Coalition values are memoized across permutations.
inline Attribution shapley_sampled(const ValueFn& f, std::size_t n,
                                   std::uint64_t n_permutations, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorCode::InvalidConfig, "need at least one group");
  if (n > 63) throw Error(ErrorCode::TooManyGroups, "more than 63 groups");
  if (n_permutations == 0) {
    throw Error(ErrorCode::InvalidConfig, "n_permutations must be >= 1");
  }

  std::unordered_map<std::uint64_t, double> cache;
  std::vector<bool> present(n);
  auto eval = [&](std::uint64_t mask) {
    auto it = cache.find(mask);
    if (it != cache.end()) return it->second;
    for (std::size_t i = 0; i < n; ++i) present[i] = (mask >> i) & 1u;
    double v = f(present);
    cache.emplace(mask, v);
    return v;
  };

  double n_fact = 1.0;
  for (std::size_t i = 2; i <= n; ++i) n_fact *= static_cast<double>(i);
  const bool exhaustive = n <= 8 && static_cast<double>(n_permutations) >= n_fact;

  Attribution a;
  a.method = "sampled";
  a.seed = seed;
  a.base_value = eval(0);
  std::vector<double> sum(n, 0.0), sumsq(n, 0.0);
  std::uint64_t done = 0;

  auto run_perm = [&](const std::vector<std::size_t>& perm) {
    std::uint64_t mask = 0;
    double prev = a.base_value;
    for (std::size_t i : perm) {
      mask |= std::uint64_t{1} << i;
      double cur = eval(mask);
      double marginal = cur - prev;
      sum[i] += marginal;
      sumsq[i] += marginal * marginal;
      prev = cur;
    }
    ++done;
  };

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  if (exhaustive) {
    do {
      run_perm(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    Rng rng(seed);
    for (std::uint64_t p = 0; p < n_permutations; ++p) {
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm);
      run_perm(perm);
    }
  }
  a.n_permutations = done;
  a.phi.assign(n, 0.0);
  a.stderrs.assign(n, 0.0);
  const double dn = static_cast<double>(done);
  for (std::size_t i = 0; i < n; ++i) {
    a.phi[i] = sum[i] / dn;
    if (done > 1) {
      double var = (sumsq[i] - dn * a.phi[i] * a.phi[i]) / (dn - 1.0);
      a.stderrs[i] = std::sqrt(std::max(var, 0.0) / dn);
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Model ablation: absent groups have their tokens replaced by [MASK], and
// the value of a coalition is the classifier probability of the target
// class. Special tokens never belong to a group, so they survive every
// ablation.
inline ValueFn make_ablation_closure(Encoder& enc, const Vocabulary& vocab,
                                     const TokenIds& ids, const FeatureGrouping& grouping,
                                     std::size_t target_class) {
  grouping.validate();
  if (enc.config().n_classes == 0) {
    throw Error(ErrorCode::HeadMissing, "ablation needs a classifier head");
  }
  if (target_class >= static_cast<std::size_t>(enc.config().n_classes)) {
    throw Error(ErrorCode::InvalidConfig, "target class out of range");
  }
  for (const auto& g : grouping.groups) {
    if (g.end > ids.size()) {
      throw Error(ErrorCode::InvalidConfig, "feature group exceeds the sequence");
    }
    for (std::size_t t = g.start; t < g.end; ++t) {
      if (vocab.is_special(ids[t])) {
        throw Error(ErrorCode::InvalidConfig, "special tokens cannot be ablated");
      }
    }
  }
  const int mask_id = vocab.mask_id;
  return [&enc, mask_id, ids, grouping, target_class](const std::vector<bool>& present) {
    TokenIds work = ids;
    for (std::size_t g = 0; g < grouping.groups.size(); ++g) {
      if (present[g]) continue;
      for (std::size_t t = grouping.groups[g].start; t < grouping.groups[g].end; ++t) {
        work[t] = mask_id;
      }
    }
    enc.forward(work);
    return softmax(enc.class_logits())[target_class];
  };
}

// ---------------------------------------------------------------------------
// Groupings over an encoded text. Spans are positions in the sequence
// produced by encode_with_specials (so offset 1 for [CLS]); words whose
// tokens fall past the truncation point are clipped or dropped.

inline FeatureGrouping word_grouping(const std::string& text, const Vocabulary& vocab,
                                     int max_len) {
  FeatureGrouping out;
  const std::size_t body_limit = static_cast<std::size_t>(max_len) - 2;
  std::size_t pos = 1;  // after [CLS]
  std::size_t used = 0;
  std::istringstream in(text);
  std::string word;
  while (in >> word && used < body_limit) {
    auto toks = tokenize(word, vocab);
    if (toks.empty()) continue;
    std::size_t take = std::min(toks.size(), body_limit - used);
    bool special_only = true;
    for (std::size_t i = 0; i < take; ++i) special_only = special_only && vocab.is_special(toks[i]);
    if (!special_only) {
      out.groups.push_back({word, pos, pos + take});
    }
    pos += take;
    used += take;
  }
  out.validate();
  return out;
}

inline FeatureGrouping token_grouping(const std::string& text, const Vocabulary& vocab,
                                      int max_len) {
  FeatureGrouping out;
  auto ids = encode_with_specials(text, vocab, max_len);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (vocab.is_special(ids[i])) continue;
    out.groups.push_back({vocab.surface(ids[i]), i, i + 1});
  }
  out.validate();
  return out;
}

// Word groups for a contextualized sample, tagging each group as main
// paragraph or context. Separator tokens belong to no group.
struct ContextGrouping {
  FeatureGrouping grouping;
  std::vector<bool> is_main;
};

inline ContextGrouping sample_word_grouping(const Sample& s, const Vocabulary& vocab,
                                            int max_len, const std::string& sep = "[SEP]") {
  struct Piece {
    std::string text;
    bool main;
    bool ablatable;
  };
  std::vector<Piece> pieces;
  bool want_prev = s.context_mode != ContextMode::NoContext && s.prev.has_value();
  bool want_next = s.context_mode == ContextMode::Context && s.next.has_value();
  if (want_prev) {
    pieces.push_back({s.prev->text, false, true});
    pieces.push_back({sep, false, false});
  }
  pieces.push_back({s.main.text, true, true});
  if (want_next) {
    pieces.push_back({sep, false, false});
    pieces.push_back({s.next->text, false, true});
  }

  ContextGrouping out;
  const std::size_t body_limit = static_cast<std::size_t>(max_len) - 2;
  std::size_t pos = 1;
  std::size_t used = 0;
  for (const auto& piece : pieces) {
    std::istringstream in(piece.text);
    std::string word;
    while (in >> word && used < body_limit) {
      auto toks = tokenize(word, vocab);
      if (toks.empty()) continue;
      std::size_t take = std::min(toks.size(), body_limit - used);
      bool special_only = true;
      for (std::size_t i = 0; i < take; ++i) {
        special_only = special_only && vocab.is_special(toks[i]);
      }
      if (piece.ablatable && !special_only) {
        out.grouping.groups.push_back({word, pos, pos + take});
        out.is_main.push_back(piece.main);
      }
      pos += take;
      used += take;
    }
    if (used >= body_limit) break;
  }
  out.grouping.validate();
  return out;
}

// Ratio of the main paragraph's total attribution to the context's.
// A context total below 1e-9 in magnitude yields +infinity.
inline double context_contribution_ratio(const std::vector<double>& phi,
                                         const std::vector<bool>& is_main) {
  if (phi.size() != is_main.size()) {
    throw Error(ErrorCode::LengthMismatch, "phi and group tags differ in length");
  }
  double main_sum = 0.0, ctx_sum = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    (is_main[i] ? main_sum : ctx_sum) += phi[i];
  }
  if (std::fabs(ctx_sum) < 1e-9) return std::numeric_limits<double>::infinity();
  return main_sum / ctx_sum;
}

// ---------------------------------------------------------------------------
// Reports

struct ExplainReport {
  std::string sample_id;
  std::vector<std::string> classes;
  std::string target;
  std::string predicted;
  double predicted_prob = 0.0;
  FeatureGrouping grouping;
  Attribution attribution;
};

struct ExplainOptions {
  bool sampled = false;
  std::uint64_t n_permutations = 2000;
  std::uint64_t seed = 42;
};

// Explains the classifier probability of the target class (default: the
// predicted class) for one encoded text.
inline ExplainReport explain_classifier(Encoder& enc, const Vocabulary& vocab,
                                        const std::string& text,
                                        const std::vector<std::string>& classes,
                                        const FeatureGrouping& grouping,
                                        const ExplainOptions& opts = {},
                                        int target_class = -1,
                                        const std::string& sample_id = std::string()) {
  if (static_cast<int>(classes.size()) != enc.config().n_classes) {
    throw Error(ErrorCode::LengthMismatch, "class list does not match the model head");
  }
  auto ids = encode_with_specials(text, vocab, enc.config().max_len);
  auto dist = classify_probs(enc, vocab, text);
  std::size_t pred = 0;
  for (std::size_t c = 1; c < dist.size(); ++c) {
    if (dist[c] > dist[pred]) pred = c;
  }
  std::size_t target = target_class < 0 ? pred : static_cast<std::size_t>(target_class);
  if (target >= classes.size()) {
    throw Error(ErrorCode::InvalidConfig, "target class out of range");
  }

  grouping.validate();
  for (const auto& g : grouping.groups) {
    if (g.end > ids.size()) {
      throw Error(ErrorCode::InvalidConfig, "feature group exceeds the sequence");
    }
    for (std::size_t t = g.start; t < g.end; ++t) {
      if (vocab.is_special(ids[t])) {
        throw Error(ErrorCode::InvalidConfig, "special tokens cannot be ablated");
      }
    }
  }
  ValueFn f = [&enc, &vocab, &ids, &grouping, target](const std::vector<bool>& present) {
    TokenIds work = ids;
    for (std::size_t g = 0; g < grouping.groups.size(); ++g) {
      if (present[g]) continue;
      for (std::size_t t = grouping.groups[g].start; t < grouping.groups[g].end; ++t) {
        work[t] = vocab.mask_id;
      }
    }
    enc.forward(work);
    return softmax(enc.class_logits())[target];
  };

  ExplainReport report;
  report.sample_id = sample_id;
  report.classes = classes;
  report.target = classes[target];
  report.predicted = classes[pred];
  report.predicted_prob = dist[pred];
  report.grouping = grouping;
  report.attribution = opts.sampled
                           ? shapley_sampled(f, grouping.groups.size(),
                                             opts.n_permutations, opts.seed)
                           : shapley_exact(f, grouping.groups.size());
  return report;
}

inline nlohmann::json report_to_json(const ExplainReport& r) {
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t i = 0; i < r.grouping.groups.size(); ++i) {
    nlohmann::json g{{"text", r.grouping.groups[i].text},
                     {"start", r.grouping.groups[i].start},
                     {"end", r.grouping.groups[i].end},
                     {"phi", r.attribution.phi[i]}};
    if (!r.attribution.stderrs.empty()) g["stderr"] = r.attribution.stderrs[i];
    groups.push_back(g);
  }
  nlohmann::json j{{"sample_id", r.sample_id},
                   {"target", r.target},
                   {"predicted", r.predicted},
                   {"predicted_prob", r.predicted_prob},
                   {"base_value", r.attribution.base_value},
                   {"method", r.attribution.method},
                   {"groups", groups}};
  if (r.attribution.method == "sampled") {
    j["n_permutations"] = r.attribution.n_permutations;
    j["seed"] = r.attribution.seed;
  }
  return j;
}

// ANSI or HTML rendering: positive attributions in blue, negative in red,
// with intensity scaled by |phi| relative to the largest magnitude.
inline std::string render_report(const ExplainReport& r, const std::string& format) {
  double maxabs = 0.0;
  for (double p : r.attribution.phi) maxabs = std::max(maxabs, std::fabs(p));
  if (maxabs == 0.0) maxabs = 1.0;

  std::ostringstream out;
  if (format == "ansi") {
    out << "predicted=" << r.predicted << " p=" << r.predicted_prob
        << " target=" << r.target << " base=" << r.attribution.base_value << "\n";
    for (std::size_t i = 0; i < r.grouping.groups.size(); ++i) {
      double p = r.attribution.phi[i];
      double t = std::fabs(p) / maxabs;
      int level = t > 0.66 ? 1 : (t > 0.33 ? 2 : 0);
      const char* code = p >= 0 ? (level == 1 ? "\033[1;34m" : level == 2 ? "\033[34m" : "\033[2;34m")
                                : (level == 1 ? "\033[1;31m" : level == 2 ? "\033[31m" : "\033[2;31m");
      if (i) out << ' ';
      out << code << r.grouping.groups[i].text << "\033[0m";
    }
    out << "\n";
    return out.str();
  }
  if (format == "html") {
    auto esc = [](const std::string& s) {
      std::string o;
      for (char c : s) {
        switch (c) {
          case '<': o += "&lt;"; break;
          case '>': o += "&gt;"; break;
          case '&': o += "&amp;"; break;
          case '"': o += "&quot;"; break;
          default: o += c;
        }
      }
      return o;
    };
    out << "<div class=\"attribution\"><p>predicted=" << esc(r.predicted)
        << " p=" << r.predicted_prob << " target=" << esc(r.target)
        << " base=" << r.attribution.base_value << "</p><p>";
    for (std::size_t i = 0; i < r.grouping.groups.size(); ++i) {
      double p = r.attribution.phi[i];
      double alpha = std::fabs(p) / maxabs;
      const char* rgb = p >= 0 ? "60,90,220" : "220,60,60";
      if (i) out << ' ';
      out << "<span style=\"background-color:rgba(" << rgb << ',' << alpha
          << ")\">" << esc(r.grouping.groups[i].text) << "</span>";
    }
    out << "</p></div>\n";
    return out.str();
  }
  throw Error(ErrorCode::InvalidConfig, "unknown render format '" + format + "'");
}

}  // namespace clozepet
