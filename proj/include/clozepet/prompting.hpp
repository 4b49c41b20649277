#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "clozepet/error.hpp"
#include "clozepet/model.hpp"
#include "clozepet/train.hpp"
#include "clozepet/vocab.hpp"

namespace clozepet {

// ---------------------------------------------------------------------------
// Pattern templates: a sequence of parts around exactly one sample slot,
// with at least one mask.

struct PatternPart {
  enum Kind { Sample, Mask, Literal } kind = Literal;
  std::string literal;
};

struct PatternTemplate {
  std::string name;
  std::vector<PatternPart> parts;

  int mask_count() const {
    int n = 0;
    for (const auto& p : parts) n += p.kind == PatternPart::Mask;
    return n;
  }

  void validate() const {
    if (name.empty()) throw Error(ErrorCode::InvalidConfig, "template needs a name");
    int samples = 0;
    for (const auto& p : parts) samples += p.kind == PatternPart::Sample;
    if (samples != 1) {
      throw Error(ErrorCode::InvalidConfig,
                  "template '" + name + "' must contain exactly one [TEXT] slot");
    }
    if (mask_count() < 1) {
      throw Error(ErrorCode::InvalidConfig,
                  "template '" + name + "' must contain at least one [MASK]");
    }
  }

  // Pattern string with SAMPLE / [MASK] placeholders, space-joined.
  std::string pattern() const {
    std::string out;
    for (const auto& p : parts) {
      if (!out.empty()) out += ' ';
      switch (p.kind) {
        case PatternPart::Sample: out += "SAMPLE"; break;
        case PatternPart::Mask: out += "[MASK]"; break;
        case PatternPart::Literal: out += p.literal; break;
      }
    }
    return out;
  }
};

// The word SAMPLE marks the input slot, [MASK] a mask token; anything
// else is literal prompt text.
inline PatternTemplate parse_pattern(const std::string& name, const std::string& pattern) {
  PatternTemplate t;
  t.name = name;
  std::istringstream in(pattern);
  std::string word;
  while (in >> word) {
    PatternPart part;
    if (word == "SAMPLE") {
      part.kind = PatternPart::Sample;
    } else if (word == "[MASK]") {
      part.kind = PatternPart::Mask;
    } else {
      part.kind = PatternPart::Literal;
      part.literal = word;
    }
    t.parts.push_back(part);
  }
  t.validate();
  return t;
}

// The five hand-written templates.
inline std::vector<PatternTemplate> core_templates() {
  return {
      parse_pattern("null", "SAMPLE [MASK]"),
      parse_pattern("colon", "SAMPLE : [MASK]"),
      parse_pattern("dash", "SAMPLE - [MASK]"),
      parse_pattern("prompt", "SAMPLE Sektion [MASK]"),
      parse_pattern("qa",
                    "SAMPLE Frage: Zu welcher Sektion gehört dieser Text? "
                    "Antwort: [MASK]"),
  };
}

// Token-free variants: the sample with masks on either side.
inline std::vector<PatternTemplate> null_templates() {
  return {
      parse_pattern("null", "SAMPLE [MASK]"),
      parse_pattern("prefix_null", "[MASK] SAMPLE"),
      parse_pattern("wrap_null", "[MASK] SAMPLE [MASK]"),
  };
}

// "core", "null" or "all" (the union, merged by name).
inline std::vector<PatternTemplate> template_group(const std::string& group) {
  if (group == "core") return core_templates();
  if (group == "null") return null_templates();
  if (group == "all") {
    auto out = core_templates();
    for (auto& t : null_templates()) {
      bool seen = false;
      for (const auto& have : out) seen = seen || have.name == t.name;
      if (!seen) out.push_back(t);
    }
    return out;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown template group '" + group + "'");
}

// Template file format: one block per template with "name:" and "parts:"
// lines, '#' comments, blank lines between blocks optional.
inline std::string format_templates(const std::vector<PatternTemplate>& templates) {
  std::string out;
  for (const auto& t : templates) {
    if (!out.empty()) out += "\n";
    out += "name: " + t.name + "\n";
    out += "parts: " + t.pattern() + "\n";
  }
  return out;
}

inline std::vector<PatternTemplate> parse_templates(const std::string& text) {
  auto trim = [](std::string s) {
    auto a = s.find_first_not_of(" \t\r");
    auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  std::vector<PatternTemplate> out;
  std::string name;
  bool have_name = false;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("name:", 0) == 0) {
      if (have_name) {
        throw Error(ErrorCode::InvalidConfig, "template '" + name + "' has no parts line");
      }
      name = trim(line.substr(5));
      if (name.empty()) throw Error(ErrorCode::InvalidConfig, "empty template name");
      have_name = true;
    } else if (line.rfind("parts:", 0) == 0) {
      if (!have_name) {
        throw Error(ErrorCode::InvalidConfig, "parts line before any name line");
      }
      for (const auto& have : out) {
        if (have.name == name) {
          throw Error(ErrorCode::InvalidConfig, "duplicate template name '" + name + "'");
        }
      }
      out.push_back(parse_pattern(name, trim(line.substr(6))));
      have_name = false;
    } else {
      throw Error(ErrorCode::InvalidConfig, "unrecognized template line: " + line);
    }
  }
  if (have_name) {
    throw Error(ErrorCode::InvalidConfig, "template '" + name + "' has no parts line");
  }
  if (out.empty()) throw Error(ErrorCode::InvalidConfig, "no templates defined");
  return out;
}

// ---------------------------------------------------------------------------
// Prompt encoding

struct PromptEncoding {
  TokenIds ids;
  std::vector<std::size_t> mask_positions;
};

// [CLS] + rendered pattern + [SEP]. The fixed parts always survive; the
// sample is truncated from the left to fit, keeping its tail. If the fixed
// parts alone exceed max_len the template cannot be applied.
inline PromptEncoding apply_pattern(const PatternTemplate& tmpl, const std::string& text,
                                    const Vocabulary& vocab, int max_len) {
  tmpl.validate();
  TokenIds sample_ids = tokenize(text, vocab);
  std::size_t fixed = 2;  // [CLS] and [SEP]
  for (const auto& p : tmpl.parts) {
    if (p.kind == PatternPart::Mask) {
      fixed += 1;
    } else if (p.kind == PatternPart::Literal) {
      fixed += tokenize(p.literal, vocab).size();
    }
  }
  if (fixed > static_cast<std::size_t>(max_len)) {
    throw Error(ErrorCode::TemplateOverflow,
                "template '" + tmpl.name + "' needs " + std::to_string(fixed) +
                    " tokens, max_len is " + std::to_string(max_len));
  }
  std::size_t budget = static_cast<std::size_t>(max_len) - fixed;
  if (sample_ids.size() > budget) {
    sample_ids.erase(sample_ids.begin(),
                     sample_ids.begin() + static_cast<std::ptrdiff_t>(sample_ids.size() - budget));
  }
  PromptEncoding enc;
  enc.ids.push_back(vocab.cls_id);
  for (const auto& p : tmpl.parts) {
    switch (p.kind) {
      case PatternPart::Sample:
        enc.ids.insert(enc.ids.end(), sample_ids.begin(), sample_ids.end());
        break;
      case PatternPart::Mask:
        enc.mask_positions.push_back(enc.ids.size());
        enc.ids.push_back(vocab.mask_id);
        break;
      case PatternPart::Literal: {
        auto lit = tokenize(p.literal, vocab);
        enc.ids.insert(enc.ids.end(), lit.begin(), lit.end());
        break;
      }
    }
  }
  enc.ids.push_back(vocab.sep_id);
  return enc;
}

// ---------------------------------------------------------------------------
// Verbalizers: one vocabulary token per class.

struct Verbalizer {
  std::vector<std::string> classes;
  std::vector<std::string> tokens;

  void validate() const {
    if (classes.empty() || classes.size() != tokens.size()) {
      throw Error(ErrorCode::InvalidConfig, "verbalizer must map every class to a token");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      for (std::size_t j = i + 1; j < tokens.size(); ++j) {
        if (tokens[i] == tokens[j]) {
          throw Error(ErrorCode::InvalidConfig,
                      "verbalizer token '" + tokens[i] + "' is assigned twice");
        }
        if (classes[i] == classes[j]) {
          throw Error(ErrorCode::InvalidConfig,
                      "verbalizer class '" + classes[i] + "' appears twice");
        }
      }
    }
  }

  std::vector<int> token_ids(const Vocabulary& vocab) const {
    validate();
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
      int id = vocab.lookup(t);
      if (id < 0) {
        throw Error(ErrorCode::MalformedTarget,
                    "verbalizer token '" + t + "' is not a single vocabulary token");
      }
      ids.push_back(id);
    }
    return ids;
  }
};

inline std::string format_verbalizer(const Verbalizer& v) {
  std::string out;
  for (std::size_t i = 0; i < v.classes.size(); ++i) {
    out += v.classes[i] + " = " + v.tokens[i] + "\n";
  }
  return out;
}

inline Verbalizer parse_verbalizer(const std::string& text) {
  Verbalizer v;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw Error(ErrorCode::InvalidConfig, "verbalizer line missing '=': " + line);
    }
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t\r");
      auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    v.classes.push_back(trim(line.substr(0, eq)));
    v.tokens.push_back(trim(line.substr(eq + 1)));
  }
  v.validate();
  return v;
}

// Per-class scores at the mask: the log-probability (over the full
// vocabulary) of each class token, averaged over mask positions when the
// template has several. Pre-softmax with respect to the class axis.
inline std::vector<double> verbalizer_class_logits(Encoder& enc,
                                                   const PromptEncoding& prompt,
                                                   const std::vector<int>& verb_ids) {
  if (prompt.mask_positions.empty()) {
    throw Error(ErrorCode::NoMaskPresent, "prompt has no mask position");
  }
  enc.forward(prompt.ids);
  std::vector<double> out(verb_ids.size(), 0.0);
  for (auto pos : prompt.mask_positions) {
    auto lp = log_softmax(enc.mlm_logits(pos));
    for (std::size_t c = 0; c < verb_ids.size(); ++c) {
      out[c] += lp[static_cast<std::size_t>(verb_ids[c])];
    }
  }
  for (double& v : out) v /= static_cast<double>(prompt.mask_positions.size());
  return out;
}

// ---------------------------------------------------------------------------
// Automatic verbalizer search

struct CandidateFilter {
  int min_alpha_chars = 2;
  int top_k_frequency = 10000;
  bool require_alphabetic = true;
};

// Candidate pool: tokens passing the filter, ranked by frequency in the
// unlabeled texts, top_k_frequency kept. Ties resolve to the lower token
// id.
inline std::vector<int> petal_candidates(const std::vector<std::string>& unlabeled_texts,
                                         const Vocabulary& vocab,
                                         const CandidateFilter& filter = {}) {
  if (unlabeled_texts.empty()) {
    throw Error(ErrorCode::EmptyUnlabeled, "candidate pool needs unlabeled texts");
  }
  std::vector<long long> counts(static_cast<std::size_t>(vocab.size()), 0);
  for (const auto& text : unlabeled_texts) {
    for (int id : tokenize(text, vocab)) counts[static_cast<std::size_t>(id)]++;
  }
  std::vector<int> pool;
  for (int id = 0; id < vocab.size(); ++id) {
    if (vocab.is_special(id)) continue;
    if (counts[static_cast<std::size_t>(id)] == 0) continue;
    const std::string& surface = vocab.surface(id);
    if (filter.require_alphabetic && !is_alphabetic_token(surface)) continue;
    if (codepoint_count(surface) < static_cast<std::size_t>(filter.min_alpha_chars)) continue;
    pool.push_back(id);
  }
  std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) {
    auto ca = counts[static_cast<std::size_t>(a)], cb = counts[static_cast<std::size_t>(b)];
    if (ca != cb) return ca > cb;
    return a < b;
  });
  if (pool.size() > static_cast<std::size_t>(filter.top_k_frequency)) {
    pool.resize(static_cast<std::size_t>(filter.top_k_frequency));
  }
  return pool;
}

// Scores each candidate token per class as the mean log-probability at
// the mask over that class's few-shot samples, then assigns greedily in
// descending score order without token reuse. Ties prefer the earlier
// class, then the lower token id.
inline Verbalizer petal_assign(Encoder& enc, const Vocabulary& vocab,
                               const PatternTemplate& tmpl,
                               const std::vector<std::string>& texts,
                               const std::vector<std::string>& labels,
                               const std::vector<std::string>& classes,
                               const std::vector<int>& candidates) {
  if (texts.size() != labels.size()) {
    throw Error(ErrorCode::LengthMismatch, "texts and labels differ in length");
  }
  if (candidates.size() < classes.size()) {
    throw Error(ErrorCode::PoolTooSmall,
                std::to_string(candidates.size()) + " candidates for " +
                    std::to_string(classes.size()) + " classes");
  }
  std::vector<std::vector<std::size_t>> by_class(classes.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = std::find(classes.begin(), classes.end(), labels[i]);
    if (it == classes.end()) {
      throw Error(ErrorCode::UnknownLabel, "label '" + labels[i] + "' not in class list");
    }
    by_class[static_cast<std::size_t>(it - classes.begin())].push_back(i);
  }
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (by_class[c].empty()) {
      throw Error(ErrorCode::EmptyCorpus, "class '" + classes[c] + "' has no samples");
    }
  }

  // score[c][k]: mean log-prob of candidate k at the mask for class c
  std::vector<std::vector<double>> score(classes.size(),
                                         std::vector<double>(candidates.size(), 0.0));
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (auto si : by_class[c]) {
      auto prompt = apply_pattern(tmpl, texts[si], vocab, enc.config().max_len);
      enc.forward(prompt.ids);
      std::vector<double> acc(candidates.size(), 0.0);
      for (auto pos : prompt.mask_positions) {
        auto lp = log_softmax(enc.mlm_logits(pos));
        for (std::size_t k = 0; k < candidates.size(); ++k) {
          acc[k] += lp[static_cast<std::size_t>(candidates[k])];
        }
      }
      for (std::size_t k = 0; k < candidates.size(); ++k) {
        score[c][k] += acc[k] / static_cast<double>(prompt.mask_positions.size());
      }
    }
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      score[c][k] /= static_cast<double>(by_class[c].size());
    }
  }

  std::vector<bool> class_done(classes.size(), false);
  std::vector<bool> token_used(candidates.size(), false);
  std::vector<std::string> assigned(classes.size());
  for (std::size_t round = 0; round < classes.size(); ++round) {
    std::size_t best_c = 0, best_k = 0;
    double best = 0.0;
    bool have = false;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (class_done[c]) continue;
      for (std::size_t k = 0; k < candidates.size(); ++k) {
        if (token_used[k]) continue;
        bool better = !have || score[c][k] > best;
        bool tie = have && score[c][k] == best;
        if (tie && (c < best_c || (c == best_c && candidates[k] < candidates[best_k]))) {
          better = true;
        }
        if (better) {
          best = score[c][k];
          best_c = c;
          best_k = k;
          have = true;
        }
      }
    }
    class_done[best_c] = true;
    token_used[best_k] = true;
    assigned[best_c] = vocab.surface(candidates[best_k]);
  }
  Verbalizer v;
  v.classes = classes;
  v.tokens = assigned;
  v.validate();
  return v;
}

// Full automatic verbalizer search: builds the candidate pool from the
// unlabeled texts, then assigns tokens using the few-shot samples.
inline Verbalizer petal_select(Encoder& enc, const Vocabulary& vocab,
                               const PatternTemplate& tmpl,
                               const std::vector<std::string>& fewshot_texts,
                               const std::vector<std::string>& fewshot_labels,
                               const std::vector<std::string>& classes,
                               const CandidateFilter& filter,
                               const std::vector<std::string>& unlabeled_texts) {
  auto pool = petal_candidates(unlabeled_texts, vocab, filter);
  return petal_assign(enc, vocab, tmpl, fewshot_texts, fewshot_labels, classes, pool);
}

}  // namespace clozepet
