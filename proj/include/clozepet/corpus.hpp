#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clozepet/csv.hpp"
#include "clozepet/error.hpp"
#include "clozepet/rng.hpp"

#include "json.hpp"

namespace clozepet {

struct Paragraph {
  std::string doc_id;
  int index = 0;  // 0-based position within the document
  std::string text;
  std::string label;
};

enum class ContextMode { NoContext, PrevContext, Context };

inline const char* context_mode_name(ContextMode m) {
  switch (m) {
    case ContextMode::NoContext: return "nocontext";
    case ContextMode::PrevContext: return "prevcontext";
    case ContextMode::Context: return "context";
  }
  return "nocontext";
}

inline ContextMode parse_context_mode(const std::string& s) {
  if (s == "nocontext") return ContextMode::NoContext;
  if (s == "prevcontext") return ContextMode::PrevContext;
  if (s == "context") return ContextMode::Context;
  throw Error(ErrorCode::InvalidConfig, "unknown context mode '" + s + "'");
}

struct Sample {
  Paragraph main;
  std::optional<Paragraph> prev;
  std::optional<Paragraph> next;
  ContextMode context_mode = ContextMode::NoContext;
  std::string rendered;
};

// Joins the main paragraph with its neighbors according to the context
// mode. A missing neighbor is omitted together with its separator, so the
// first/last paragraph of a document renders without padding.
inline std::string render_text(const std::string& main,
                               const std::optional<std::string>& prev,
                               const std::optional<std::string>& next,
                               ContextMode mode,
                               const std::string& sep = "[SEP]") {
  std::string out;
  bool want_prev = mode != ContextMode::NoContext;
  bool want_next = mode == ContextMode::Context;
  if (want_prev && prev.has_value()) {
    out += *prev;
    out += " " + sep + " ";
  }
  out += main;
  if (want_next && next.has_value()) {
    out += " " + sep + " ";
    out += *next;
  }
  return out;
}

inline Sample render_sample(const Paragraph& main,
                            const std::optional<Paragraph>& prev,
                            const std::optional<Paragraph>& next,
                            ContextMode mode,
                            const std::string& sep = "[SEP]") {
  Sample s;
  s.main = main;
  s.prev = prev;
  s.next = next;
  s.context_mode = mode;
  std::optional<std::string> prev_text, next_text;
  if (prev.has_value()) prev_text = prev->text;
  if (next.has_value()) next_text = next->text;
  s.rendered = render_text(main.text, prev_text, next_text, mode, sep);
  return s;
}

// Builds one sample per paragraph, pairing it with its in-document
// neighbors. Paragraphs must arrive grouped per document with contiguous
// indices (the corpus invariant).
inline std::vector<Sample> contextualize(const std::vector<Paragraph>& corpus,
                                         ContextMode mode,
                                         const std::string& sep = "[SEP]") {
  std::vector<Sample> samples;
  samples.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::optional<Paragraph> prev, next;
    if (i > 0 && corpus[i - 1].doc_id == corpus[i].doc_id) prev = corpus[i - 1];
    if (i + 1 < corpus.size() && corpus[i + 1].doc_id == corpus[i].doc_id)
      next = corpus[i + 1];
    samples.push_back(render_sample(corpus[i], prev, next, mode, sep));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Label schema

struct LabelSchema {
  std::vector<std::string> classes;
  std::map<std::string, std::string> merge_map;  // raw -> meta
  std::set<std::string> dropped;

  void validate() const {
    std::set<std::string> class_set(classes.begin(), classes.end());
    if (class_set.size() != classes.size()) {
      throw Error(ErrorCode::InvalidConfig, "schema classes are not distinct");
    }
    for (const auto& [raw, meta] : merge_map) {
      if (!class_set.count(meta)) {
        throw Error(ErrorCode::InvalidConfig,
                    "merge target '" + meta + "' is not a schema class");
      }
      if (dropped.count(raw)) {
        throw Error(ErrorCode::InvalidConfig,
                    "label '" + raw + "' is both merged and dropped");
      }
    }
  }

  // Meta label for a raw label; nullopt when dropped.
  std::optional<std::string> resolve(const std::string& raw) const {
    if (dropped.count(raw)) return std::nullopt;
    auto it = merge_map.find(raw);
    if (it != merge_map.end()) return it->second;
    for (const auto& c : classes) {
      if (c == raw) return raw;
    }
    throw Error(ErrorCode::UnknownLabel, "'" + raw + "' is not covered by the schema");
  }

  nlohmann::json to_json() const {
    return {{"classes", classes},
            {"merge_map", merge_map},
            {"dropped", std::vector<std::string>(dropped.begin(), dropped.end())}};
  }

  static LabelSchema from_json(const nlohmann::json& j) {
    LabelSchema s;
    s.classes = j.at("classes").get<std::vector<std::string>>();
    if (j.contains("merge_map")) {
      s.merge_map = j.at("merge_map").get<std::map<std::string, std::string>>();
    }
    if (j.contains("dropped")) {
      for (const auto& d : j.at("dropped")) s.dropped.insert(d.get<std::string>());
    }
    s.validate();
    return s;
  }

  // Nine-class doctor's-letter schema: the Labor section is dropped and
  // seven raw classes fold into the Diagnosen / Medikation / Befunde meta
  // classes.
  static LabelSchema default_schema() {
    LabelSchema s;
    s.classes = {"Anrede",
                 "Diagnosen",
                 "AllergienUnverträglichkeitenRisiken",
                 "Anamnese",
                 "Medikation",
                 "Befunde",
                 "Zusammenfassung",
                 "Mix",
                 "Abschluss"};
    s.merge_map = {{"AktuellDiagnosen", "Diagnosen"},
                   {"Diagnosen", "Diagnosen"},
                   {"AufnahmeMedikation", "Medikation"},
                   {"EntlassMedikation", "Medikation"},
                   {"KUBefunde", "Befunde"},
                   {"EchoBefunde", "Befunde"},
                   {"Befunde", "Befunde"}};
    s.dropped = {"Labor"};
    s.validate();
    return s;
  }
};

// Maps raw labels to meta classes, removes dropped paragraphs and
// re-derives per-document indices. Relative order is preserved.
inline std::vector<Paragraph> apply_schema(const std::vector<Paragraph>& corpus,
                                           const LabelSchema& schema) {
  schema.validate();
  std::vector<Paragraph> out;
  out.reserve(corpus.size());
  std::map<std::string, int> next_index;
  for (const auto& p : corpus) {
    auto meta = schema.resolve(p.label);
    if (!meta.has_value()) continue;
    Paragraph q = p;
    q.label = *meta;
    q.index = next_index[p.doc_id]++;
    out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus JSONL I/O

inline std::vector<Paragraph> load_paragraphs_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::vector<Paragraph> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw Error(ErrorCode::IoError,
                  path + ":" + std::to_string(lineno) + ": invalid JSON");
    }
    Paragraph p;
    p.doc_id = j.at("doc_id").get<std::string>();
    p.index = j.at("index").get<int>();
    p.text = j.at("text").get<std::string>();
    p.label = j.value("label", std::string());
    if (p.text.empty() || p.text.find('\n') != std::string::npos) {
      throw Error(ErrorCode::IoError,
                  path + ":" + std::to_string(lineno) +
                      ": paragraph text must be non-empty and newline-free");
    }
    out.push_back(std::move(p));
  }
  // Indices must be contiguous per document, in file order.
  std::map<std::string, int> expected;
  for (const auto& p : out) {
    int want = expected[p.doc_id]++;
    if (p.index != want) {
      throw Error(ErrorCode::IoError,
                  path + ": non-contiguous paragraph indices in document '" +
                      p.doc_id + "'");
    }
  }
  return out;
}

inline void save_paragraphs_jsonl(const std::vector<Paragraph>& corpus,
                                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  for (const auto& p : corpus) {
    nlohmann::json j{{"doc_id", p.doc_id},
                     {"index", p.index},
                     {"text", p.text},
                     {"label", p.label}};
    out << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Few-shot bundles

struct FewShotBundle {
  int shot_size = 0;
  int set_id = 0;  // 1..n_sets
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;  // labels cleared
  std::uint64_t seed = 0;
};

struct FewShotTree {
  std::vector<FewShotBundle> bundles;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string> bundle_row(const Sample& s, bool with_label) {
  std::vector<std::string> row{s.main.doc_id, std::to_string(s.main.index),
                               s.main.text};
  if (with_label) row.push_back(s.main.label);
  row.push_back(s.prev.has_value() ? s.prev->text : std::string());
  row.push_back(s.next.has_value() ? s.next->text : std::string());
  return row;
}

inline void write_bundle_csv(const std::vector<Sample>& samples,
                             const std::string& path, bool with_label) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << csv::format_row(with_label
                             ? std::vector<std::string>{"doc_id", "index",
                                                        "text", "label",
                                                        "prev_text", "next_text"}
                             : std::vector<std::string>{"doc_id", "index",
                                                        "text", "prev_text",
                                                        "next_text"});
  for (const auto& s : samples) out << csv::format_row(bundle_row(s, with_label));
}

inline Sample strip_label(Sample s) {
  s.main.label.clear();
  if (s.prev.has_value()) s.prev->label.clear();
  if (s.next.has_value()) s.next->label.clear();
  return s;
}

}  // namespace detail

// Per-class sampling without replacement, deterministic in the seed. The
// n_sets labeled portions are pairwise disjoint while a class population
// allows it; smaller classes fall back to independent draws with distinct
// derived seeds. A class with fewer than N members contributes everything
// it has and produces a warning.
inline FewShotTree build_fewshot_bundles(
    const std::vector<Sample>& train, const std::vector<int>& sizes,
    int n_sets, std::uint64_t seed,
    const std::vector<std::string>& class_order = {},
    const std::vector<Sample>& holdout = {},
    const std::string& out_dir = std::string()) {
  if (train.empty()) throw Error(ErrorCode::EmptyCorpus, "training corpus is empty");
  if (n_sets < 1) throw Error(ErrorCode::InvalidConfig, "n_sets must be >= 1");
  for (int n : sizes) {
    if (n < 1) throw Error(ErrorCode::InvalidConfig, "shot sizes must be positive");
  }

  std::vector<std::string> classes = class_order;
  if (classes.empty()) {
    std::set<std::string> seen;
    for (const auto& s : train) {
      if (seen.insert(s.main.label).second) classes.push_back(s.main.label);
    }
  }
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < train.size(); ++i) {
    members[train[i].main.label].push_back(i);
  }
  for (const auto& s : train) {
    bool known = false;
    for (const auto& c : classes) known = known || c == s.main.label;
    if (!known) {
      throw Error(ErrorCode::UnknownLabel,
                  "training label '" + s.main.label + "' not in class list");
    }
  }

  namespace fs = std::filesystem;
  FewShotTree tree;
  const bool emit = !out_dir.empty();
  if (emit) fs::create_directories(out_dir);

  for (int shot_size : sizes) {
    std::vector<std::set<std::size_t>> chosen(static_cast<std::size_t>(n_sets));
    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
      const auto& pool = members[classes[ci]];
      std::size_t m = pool.size();
      std::size_t want = static_cast<std::size_t>(shot_size);
      if (m < want) {
        tree.warnings.push_back("InsufficientClassPopulation: class '" +
                                classes[ci] + "' has " + std::to_string(m) +
                                " members, " + std::to_string(shot_size) +
                                " requested");
      }
      if (m >= want * static_cast<std::size_t>(n_sets)) {
        std::vector<std::size_t> order = pool;
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(shot_size), ci, 0));
        rng.shuffle(order);
        for (int k = 0; k < n_sets; ++k) {
          for (std::size_t j = 0; j < want; ++j) {
            chosen[static_cast<std::size_t>(k)].insert(
                order[static_cast<std::size_t>(k) * want + j]);
          }
        }
      } else {
        for (int k = 0; k < n_sets; ++k) {
          std::vector<std::size_t> order = pool;
          Rng rng(derive_seed(seed, static_cast<std::uint64_t>(shot_size), ci,
                              static_cast<std::uint64_t>(k + 1)));
          rng.shuffle(order);
          for (std::size_t j = 0; j < std::min(m, want); ++j) {
            chosen[static_cast<std::size_t>(k)].insert(order[j]);
          }
        }
      }
    }
    fs::path size_dir;
    if (emit) {
      size_dir = fs::path(out_dir) / (std::to_string(shot_size) + "shots");
      fs::create_directories(size_dir);
    }
    for (int k = 0; k < n_sets; ++k) {
      FewShotBundle bundle;
      bundle.shot_size = shot_size;
      bundle.set_id = k + 1;
      bundle.seed = seed;
      const auto& sel = chosen[static_cast<std::size_t>(k)];
      for (std::size_t i = 0; i < train.size(); ++i) {
        if (sel.count(i)) {
          bundle.labeled.push_back(train[i]);
        } else {
          bundle.unlabeled.push_back(detail::strip_label(train[i]));
        }
      }
      if (emit) {
        detail::write_bundle_csv(
            bundle.labeled,
            (size_dir / ("set_" + std::to_string(k + 1) + ".csv")).string(),
            true);
        detail::write_bundle_csv(
            bundle.unlabeled,
            (size_dir / ("unlabeled_" + std::to_string(k + 1) + ".csv")).string(),
            false);
      }
      tree.bundles.push_back(std::move(bundle));
    }
  }
  if (emit && !holdout.empty()) {
    fs::path holdout_dir = fs::path(out_dir) / "holdout";
    fs::create_directories(holdout_dir);
    detail::write_bundle_csv(holdout, (holdout_dir / "full_holdout.csv").string(),
                             true);
  }
  return tree;
}

// Reads a bundle CSV back into samples, re-rendering with the given mode.
inline std::vector<Sample> load_bundle_csv(const std::string& path,
                                           ContextMode mode,
                                           const std::string& sep = "[SEP]") {
  auto rows = csv::read_file(path);
  if (rows.empty()) throw Error(ErrorCode::IoError, path + ": empty CSV");
  const auto& header = rows.front();
  bool with_label = header.size() == 6;
  if (header.size() != 5 && header.size() != 6) {
    throw Error(ErrorCode::IoError, path + ": unexpected column count");
  }
  std::vector<Sample> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) {
      throw Error(ErrorCode::IoError, path + ": ragged CSV row");
    }
    Paragraph main;
    main.doc_id = row[0];
    main.index = std::stoi(row[1]);
    main.text = row[2];
    std::size_t at = 3;
    if (with_label) main.label = row[at++];
    std::optional<Paragraph> prev, next;
    if (!row[at].empty()) {
      Paragraph p;
      p.doc_id = main.doc_id;
      p.index = main.index - 1;
      p.text = row[at];
      prev = p;
    }
    ++at;
    if (!row[at].empty()) {
      Paragraph p;
      p.doc_id = main.doc_id;
      p.index = main.index + 1;
      p.text = row[at];
      next = p;
    }
    out.push_back(render_sample(main, prev, next, mode, sep));
  }
  return out;
}

}  // namespace clozepet
