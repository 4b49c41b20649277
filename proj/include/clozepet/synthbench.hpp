#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "clozepet/corpus.hpp"
#include "clozepet/error.hpp"
#include "clozepet/rng.hpp"

#include "json.hpp"

namespace clozepet {

// Synthetic letter generator: documents walk through the nine section
// classes in a canonical order; each paragraph mixes shared filler words
// with one class topic entity, and carries its class cue token with
// probability cue_strength. With probability context_dependency the cue
// lands at the end of the preceding paragraph instead, which makes the
// class unrecoverable without context.

struct ClassProfile {
  std::string name;
  std::string cue;
  std::vector<std::string> topic_words;
};

namespace detail {

// Deterministic pseudo-word from consonant-vowel syllables; injective for
// i < 75^3.
inline std::string synth_word(std::size_t i) {
  static constexpr char cons[] = "bdfghklmnprstwz";
  static constexpr char vow[] = "aeiou";
  std::string w;
  for (int s = 0; s < 3; ++s) {
    w += cons[i % 15];
    i /= 15;
    w += vow[i % 5];
    i /= 5;
  }
  return w;
}

inline void pad_with_synth_words(std::vector<std::string>& pool, std::size_t target,
                                 std::size_t stream, std::set<std::string>& taken) {
  std::uint64_t counter = 0;
  while (pool.size() < target) {
    std::uint64_t h = derive_seed(0x5e7f00d5, stream, counter++);
    std::string w = synth_word(h % (75ull * 75ull * 75ull));
    if (taken.insert(w).second) pool.push_back(w);
  }
}

}  // namespace detail

inline std::vector<ClassProfile> default_class_profiles() {
  std::vector<ClassProfile> p{
      {"Anrede", "anrede", {"sehr", "geehrte", "kollegen", "berichten", "geboren"}},
      {"Diagnosen", "diagnose", {"herzinsuffizienz", "hypertonie", "stenose", "infarkt", "diabetes"}},
      {"AllergienUnverträglichkeitenRisiken", "allergie", {"penicillin", "nikotin", "risiken", "pollen", "kontrast"}},
      {"Anamnese", "anamnese", {"beschwerden", "berichtet", "dyspnoe", "schwindel", "belastung"}},
      {"Medikation", "medikament", {"bisoprolol", "ramipril", "tabletten", "dosis", "marcumar"}},
      {"Befunde", "befund", {"echo", "ekg", "sinusrhythmus", "ventrikel", "normwertig"}},
      {"Zusammenfassung", "zusammenfassung", {"zusammenfassend", "stationaer", "aufnahme", "therapie", "verblieb"}},
      {"Mix", "verlauf", {"weiteres", "sonstiges", "hinweis", "kontrolle", "telefonisch"}},
      {"Abschluss", "abschluss", {"freundlichen", "gruessen", "hochachtungsvoll", "entlassung", "ambulant"}},
  };
  std::set<std::string> taken;
  for (const auto& c : p) {
    taken.insert(c.cue);
    for (const auto& w : c.topic_words) taken.insert(w);
  }
  // Wide pools keep any single topic word rare, so a handful of labeled
  // shots cannot cover the class vocabulary the way the unlabeled pool can.
  for (std::size_t c = 0; c < p.size(); ++c) {
    detail::pad_with_synth_words(p[c].topic_words, 40, c + 1, taken);
  }
  return p;
}

inline std::vector<std::string> default_filler_words() {
  std::vector<std::string> f{
      "der",    "die",   "das",  "und",    "mit",    "ohne",  "bei",  "vom",
      "zum",    "im",    "am",   "auf",    "nach",   "vor",   "unter", "seit",
      "gegen",  "durch", "aus",  "ist",    "war",    "sind",  "wird", "wurde",
      "zeigt",  "zeigte", "keine", "kein", "gut",    "stabil", "leicht", "deutlich",
      "aktuell", "weiterhin", "regelrecht", "unauffaellig"};
  std::set<std::string> taken(f.begin(), f.end());
  for (const auto& c : default_class_profiles()) {
    taken.insert(c.cue);
    for (const auto& w : c.topic_words) taken.insert(w);
  }
  detail::pad_with_synth_words(f, 150, 0, taken);
  return f;
}

struct GeneratorSpec {
  int n_documents = 150;
  double cue_strength = 0.5;
  // Extra per-word chance of repeating the cue inside a cue-carrying
  // paragraph. Repetition keeps the masked-LM probability of the cue high
  // even when one copy is already visible in the context.
  double cue_repeat_rate = 0.2;
  double context_dependency = 0.0;
  double section_shuffle_prob = 0.1;
  double topic_word_ratio = 0.2;
  int min_paragraph_words = 6;
  int max_paragraph_words = 12;
  int max_paragraphs_per_section = 2;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 42;
  std::vector<ClassProfile> profiles = default_class_profiles();
  std::vector<std::string> fillers = default_filler_words();

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    out.reserve(profiles.size());
    for (const auto& p : profiles) out.push_back(p.name);
    return out;
  }

  void validate() const {
    auto prob = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!prob(cue_strength) || !prob(cue_repeat_rate) || !prob(context_dependency) ||
        !prob(section_shuffle_prob) || !prob(topic_word_ratio)) {
      throw Error(ErrorCode::InvalidConfig, "generator probabilities must be in [0, 1]");
    }
    if (n_documents < 5) throw Error(ErrorCode::InvalidConfig, "need at least 5 documents");
    if (min_paragraph_words < 1 || max_paragraph_words < min_paragraph_words) {
      throw Error(ErrorCode::InvalidConfig, "bad paragraph word range");
    }
    if (max_paragraphs_per_section < 1) {
      throw Error(ErrorCode::InvalidConfig, "max_paragraphs_per_section must be >= 1");
    }
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "holdout_fraction must be in (0, 1)");
    }
    if (profiles.empty()) throw Error(ErrorCode::InvalidConfig, "no class profiles");
    std::set<std::string> names, cues;
    for (const auto& p : profiles) {
      if (!names.insert(p.name).second) {
        throw Error(ErrorCode::InvalidConfig, "duplicate class name '" + p.name + "'");
      }
      if (!cues.insert(p.cue).second) {
        throw Error(ErrorCode::InvalidConfig, "duplicate cue token '" + p.cue + "'");
      }
      if (p.topic_words.empty()) {
        throw Error(ErrorCode::InvalidConfig, "class '" + p.name + "' has no topic words");
      }
    }
    if (fillers.empty()) throw Error(ErrorCode::InvalidConfig, "no filler words");
  }

  nlohmann::json to_json() const {
    nlohmann::json profs = nlohmann::json::array();
    for (const auto& p : profiles) {
      profs.push_back({{"name", p.name}, {"cue", p.cue}, {"topic_words", p.topic_words}});
    }
    return {{"n_documents", n_documents},
            {"cue_strength", cue_strength},
            {"cue_repeat_rate", cue_repeat_rate},
            {"context_dependency", context_dependency},
            {"section_shuffle_prob", section_shuffle_prob},
            {"topic_word_ratio", topic_word_ratio},
            {"min_paragraph_words", min_paragraph_words},
            {"max_paragraph_words", max_paragraph_words},
            {"max_paragraphs_per_section", max_paragraphs_per_section},
            {"holdout_fraction", holdout_fraction},
            {"seed", seed},
            {"profiles", profs},
            {"fillers", fillers}};
  }

  static GeneratorSpec from_json(const nlohmann::json& j) {
    GeneratorSpec s;
    s.n_documents = j.value("n_documents", s.n_documents);
    s.cue_strength = j.value("cue_strength", s.cue_strength);
    s.cue_repeat_rate = j.value("cue_repeat_rate", s.cue_repeat_rate);
    s.context_dependency = j.value("context_dependency", s.context_dependency);
    s.section_shuffle_prob = j.value("section_shuffle_prob", s.section_shuffle_prob);
    s.topic_word_ratio = j.value("topic_word_ratio", s.topic_word_ratio);
    s.min_paragraph_words = j.value("min_paragraph_words", s.min_paragraph_words);
    s.max_paragraph_words = j.value("max_paragraph_words", s.max_paragraph_words);
    s.max_paragraphs_per_section = j.value("max_paragraphs_per_section", s.max_paragraphs_per_section);
    s.holdout_fraction = j.value("holdout_fraction", s.holdout_fraction);
    s.seed = j.value("seed", s.seed);
    if (j.contains("profiles")) {
      s.profiles.clear();
      for (const auto& pj : j.at("profiles")) {
        ClassProfile p;
        p.name = pj.at("name").get<std::string>();
        p.cue = pj.at("cue").get<std::string>();
        p.topic_words = pj.at("topic_words").get<std::vector<std::string>>();
        s.profiles.push_back(std::move(p));
      }
    }
    if (j.contains("fillers")) {
      s.fillers = j.at("fillers").get<std::vector<std::string>>();
    }
    s.validate();
    return s;
  }
};

struct GeneratedCorpus {
  std::vector<Paragraph> train;
  std::vector<Paragraph> test;
};

namespace seeds {
constexpr std::uint64_t kDocument = 301;
}

inline GeneratedCorpus generate(const GeneratorSpec& spec) {
  spec.validate();
  const std::size_t n_classes = spec.profiles.size();
  const int n_train_docs = std::max(
      1, std::min(spec.n_documents - 1,
                  static_cast<int>(std::lround(spec.n_documents *
                                               (1.0 - spec.holdout_fraction)))));
  GeneratedCorpus out;
  char doc_name[32];
  for (int d = 0; d < spec.n_documents; ++d) {
    Rng rng(derive_seed(spec.seed, seeds::kDocument, static_cast<std::uint64_t>(d)));
    std::vector<std::size_t> order(n_classes);
    for (std::size_t i = 0; i < n_classes; ++i) order[i] = i;
    if (rng.bernoulli(spec.section_shuffle_prob)) rng.shuffle(order);

    struct Para {
      std::size_t cls;
      std::vector<std::string> words;
      bool carries;
    };
    std::vector<Para> paras;
    for (std::size_t ci : order) {
      const auto& prof = spec.profiles[ci];
      int n_p = 1 + static_cast<int>(rng.uniform_index(
                        static_cast<std::size_t>(spec.max_paragraphs_per_section)));
      for (int p = 0; p < n_p; ++p) {
        bool carries = rng.bernoulli(spec.cue_strength);
        // One topic entity per paragraph, like a paragraph about a single
        // drug or diagnosis. Entities of the same class co-occur with the
        // cue but never with each other.
        const std::string& entity =
            prof.topic_words[rng.uniform_index(prof.topic_words.size())];
        int len = spec.min_paragraph_words +
                  static_cast<int>(rng.uniform_index(static_cast<std::size_t>(
                      spec.max_paragraph_words - spec.min_paragraph_words + 1)));
        std::vector<std::string> words;
        words.reserve(static_cast<std::size_t>(len) + 1);
        for (int w = 0; w < len; ++w) {
          if (carries && rng.bernoulli(spec.cue_repeat_rate)) {
            words.push_back(prof.cue);
          } else if (rng.bernoulli(spec.topic_word_ratio)) {
            words.push_back(entity);
          } else {
            words.push_back(spec.fillers[rng.uniform_index(spec.fillers.size())]);
          }
        }
        paras.push_back({ci, std::move(words), carries});
      }
    }
    // Cue placement, one ascending pass so a moved cue always lands after
    // the previous paragraph's own cue. A move strips every in-paragraph
    // copy so the cue really is absent from the paragraph itself.
    for (std::size_t i = 0; i < paras.size(); ++i) {
      if (!paras[i].carries) continue;
      const std::string& cue = spec.profiles[paras[i].cls].cue;
      auto& words = paras[i].words;
      if (i > 0 && rng.bernoulli(spec.context_dependency)) {
        words.erase(std::remove(words.begin(), words.end(), cue), words.end());
        if (words.empty()) words.push_back(spec.fillers[rng.uniform_index(spec.fillers.size())]);
        paras[i - 1].words.push_back(cue);
      } else {
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(
                                         rng.uniform_index(words.size() + 1)),
                     cue);
      }
    }

    std::snprintf(doc_name, sizeof doc_name, "doc_%04d", d);
    auto& bucket = d < n_train_docs ? out.train : out.test;
    for (std::size_t i = 0; i < paras.size(); ++i) {
      Paragraph p;
      p.doc_id = doc_name;
      p.index = static_cast<int>(i);
      std::string text;
      for (const auto& w : paras[i].words) {
        if (!text.empty()) text += ' ';
        text += w;
      }
      p.text = std::move(text);
      p.label = spec.profiles[paras[i].cls].name;
      bucket.push_back(std::move(p));
    }
  }
  return out;
}

inline void write_generated(const GeneratedCorpus& corpus, const GeneratorSpec& spec,
                            const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  save_paragraphs_jsonl(corpus.train, (fs::path(out_dir) / "train.jsonl").string());
  save_paragraphs_jsonl(corpus.test, (fs::path(out_dir) / "test.jsonl").string());
  std::ofstream spec_out(fs::path(out_dir) / "spec.json", std::ios::binary);
  if (!spec_out) throw Error(ErrorCode::IoError, "cannot write spec.json");
  spec_out << spec.to_json().dump(2) << "\n";
}

}  // namespace clozepet
