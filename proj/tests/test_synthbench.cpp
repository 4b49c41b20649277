#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "clozepet/synthbench.hpp"

using namespace clozepet;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

bool has_word(const std::string& text, const std::string& word) {
  for (const auto& w : split_words(text)) {
    if (w == word) return true;
  }
  return false;
}

std::map<std::string, std::vector<Paragraph>> by_document(
    const std::vector<Paragraph>& paras) {
  std::map<std::string, std::vector<Paragraph>> docs;
  for (const auto& p : paras) docs[p.doc_id].push_back(p);
  return docs;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generation is deterministic") {
  GeneratorSpec spec;
  spec.n_documents = 20;
  auto a = generate(spec);
  auto b = generate(spec);
  REQUIRE(a.train.size() == b.train.size());
  REQUIRE(a.test.size() == b.test.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].doc_id == b.train[i].doc_id);
    CHECK(a.train[i].index == b.train[i].index);
    CHECK(a.train[i].text == b.train[i].text);
    CHECK(a.train[i].label == b.train[i].label);
  }

  GeneratorSpec other = spec;
  other.seed = 43;
  auto c = generate(other);
  bool differs = a.train.size() != c.train.size();
  for (std::size_t i = 0; !differs && i < a.train.size(); ++i) {
    differs = a.train[i].text != c.train[i].text;
  }
  CHECK(differs);
}

TEST_CASE("all nine section classes are emitted") {
  GeneratorSpec spec;
  spec.n_documents = 10;
  auto names = spec.class_names();
  REQUIRE(names.size() == 9u);
  CHECK(names.front() == "Anrede");
  CHECK(names.back() == "Abschluss");

  auto corpus = generate(spec);
  std::set<std::string> seen;
  for (const auto& p : corpus.train) seen.insert(p.label);
  for (const auto& p : corpus.test) seen.insert(p.label);
  CHECK(seen == std::set<std::string>(names.begin(), names.end()));
}

TEST_CASE("documents follow the canonical section order when unshuffled") {
  GeneratorSpec spec;
  spec.n_documents = 12;
  spec.section_shuffle_prob = 0.0;
  auto corpus = generate(spec);
  auto names = spec.class_names();
  for (const auto& [doc, paras] : by_document(corpus.train)) {
    // Collapse runs of equal labels; the survivors must be the nine
    // classes in canonical order.
    std::vector<std::string> sections;
    for (const auto& p : paras) {
      if (sections.empty() || sections.back() != p.label) sections.push_back(p.label);
    }
    REQUIRE(sections == names);
  }
}

TEST_CASE("paragraph indices are contiguous per document") {
  GeneratorSpec spec;
  spec.n_documents = 8;
  auto corpus = generate(spec);
  for (const auto& [doc, paras] : by_document(corpus.train)) {
    for (std::size_t i = 0; i < paras.size(); ++i) {
      REQUIRE(paras[i].index == static_cast<int>(i));
    }
  }
}

TEST_CASE("holdout split by document") {
  GeneratorSpec spec;
  spec.n_documents = 20;
  spec.holdout_fraction = 0.2;
  auto corpus = generate(spec);
  auto train_docs = by_document(corpus.train);
  auto test_docs = by_document(corpus.test);
  CHECK(train_docs.size() == 16u);
  CHECK(test_docs.size() == 4u);
  for (const auto& [doc, _] : test_docs) {
    CHECK(train_docs.count(doc) == 0u);
  }
}

TEST_CASE("cue strength zero plants no cues") {
  GeneratorSpec spec;
  spec.n_documents = 10;
  spec.cue_strength = 0.0;
  auto corpus = generate(spec);
  std::set<std::string> cues;
  for (const auto& p : spec.profiles) cues.insert(p.cue);
  for (const auto& p : corpus.train) {
    for (const auto& w : split_words(p.text)) {
      CHECK(cues.count(w) == 0u);
    }
  }
}

TEST_CASE("cue strength one plants the class cue in every paragraph") {
  GeneratorSpec spec;
  spec.n_documents = 10;
  spec.cue_strength = 1.0;
  spec.context_dependency = 0.0;
  std::map<std::string, std::string> cue_of;
  for (const auto& p : spec.profiles) cue_of[p.name] = p.cue;
  auto corpus = generate(spec);
  for (const auto& p : corpus.train) {
    REQUIRE(has_word(p.text, cue_of[p.label]));
  }
}

TEST_CASE("full context dependency moves cues to the previous paragraph") {
  GeneratorSpec spec;
  spec.n_documents = 10;
  spec.cue_strength = 1.0;
  spec.context_dependency = 1.0;
  spec.section_shuffle_prob = 0.0;
  spec.max_paragraphs_per_section = 1;
  std::map<std::string, std::string> cue_of;
  for (const auto& p : spec.profiles) cue_of[p.name] = p.cue;

  auto corpus = generate(spec);
  for (const auto& [doc, paras] : by_document(corpus.train)) {
    REQUIRE(paras.size() == 9u);
    // The opening paragraph keeps its own cue.
    CHECK(has_word(paras[0].text, cue_of[paras[0].label]));
    for (std::size_t i = 1; i < paras.size(); ++i) {
      // Later paragraphs lose theirs...
      CHECK_FALSE(has_word(paras[i].text, cue_of[paras[i].label]));
      // ...which lands at the end of the preceding paragraph.
      auto prev_words = split_words(paras[i - 1].text);
      REQUIRE_FALSE(prev_words.empty());
      CHECK(prev_words.back() == cue_of[paras[i].label]);
    }
  }
}

TEST_CASE("each paragraph uses a single topic entity") {
  GeneratorSpec spec;
  spec.n_documents = 10;
  spec.cue_strength = 0.0;
  spec.topic_word_ratio = 0.9;
  std::map<std::string, std::set<std::string>> pool_of;
  for (const auto& p : spec.profiles) {
    pool_of[p.name] = std::set<std::string>(p.topic_words.begin(), p.topic_words.end());
  }
  auto corpus = generate(spec);
  std::size_t with_topic = 0;
  for (const auto& p : corpus.train) {
    const auto& pool = pool_of[p.label];
    std::set<std::string> topics;
    for (const auto& w : split_words(p.text)) {
      if (pool.count(w)) topics.insert(w);
    }
    REQUIRE(topics.size() <= 1u);
    with_topic += !topics.empty();
  }
  // At a 0.9 ratio nearly every paragraph shows its entity.
  CHECK(with_topic > corpus.train.size() * 9 / 10);
}

TEST_CASE("cue frequency tracks cue_strength") {
  GeneratorSpec spec;
  spec.n_documents = 40;
  spec.cue_strength = 0.5;
  spec.context_dependency = 0.0;
  std::map<std::string, std::string> cue_of;
  for (const auto& p : spec.profiles) cue_of[p.name] = p.cue;
  auto corpus = generate(spec);
  std::size_t carrying = 0;
  for (const auto& p : corpus.train) carrying += has_word(p.text, cue_of[p.label]);
  double rate = static_cast<double>(carrying) / static_cast<double>(corpus.train.size());
  CHECK(rate > 0.42);
  CHECK(rate < 0.58);
}

TEST_CASE("class vocabularies do not overlap") {
  GeneratorSpec spec;
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const auto& p : spec.profiles) {
    seen.insert(p.cue);
    ++total;
    for (const auto& w : p.topic_words) {
      seen.insert(w);
      ++total;
    }
  }
  for (const auto& f : spec.fillers) {
    seen.insert(f);
    ++total;
  }
  CHECK(seen.size() == total);
  // Roughly five hundred distinct words overall.
  CHECK(seen.size() > 450u);
  CHECK(seen.size() < 600u);
}

TEST_CASE("spec json round trip") {
  GeneratorSpec spec;
  spec.n_documents = 33;
  spec.cue_strength = 0.7;
  spec.cue_repeat_rate = 0.1;
  spec.context_dependency = 0.4;
  spec.section_shuffle_prob = 0.2;
  spec.topic_word_ratio = 0.3;
  spec.min_paragraph_words = 4;
  spec.max_paragraph_words = 9;
  spec.max_paragraphs_per_section = 3;
  spec.holdout_fraction = 0.25;
  spec.seed = 77;

  auto back = GeneratorSpec::from_json(spec.to_json());
  CHECK(back.n_documents == spec.n_documents);
  CHECK(back.cue_strength == spec.cue_strength);
  CHECK(back.cue_repeat_rate == spec.cue_repeat_rate);
  CHECK(back.context_dependency == spec.context_dependency);
  CHECK(back.section_shuffle_prob == spec.section_shuffle_prob);
  CHECK(back.topic_word_ratio == spec.topic_word_ratio);
  CHECK(back.min_paragraph_words == spec.min_paragraph_words);
  CHECK(back.max_paragraph_words == spec.max_paragraph_words);
  CHECK(back.max_paragraphs_per_section == spec.max_paragraphs_per_section);
  CHECK(back.holdout_fraction == spec.holdout_fraction);
  CHECK(back.seed == spec.seed);
  CHECK(back.profiles.size() == spec.profiles.size());
  CHECK(back.fillers == spec.fillers);

  // Identical inputs make identical corpora.
  auto a = generate(spec);
  auto b = generate(back);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].text == b.train[i].text);
  }
}

TEST_CASE("spec validation rejects bad values") {
  auto broken = [](auto mutate) {
    GeneratorSpec s;
    mutate(s);
    return s;
  };
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.cue_strength = 1.5; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.cue_repeat_rate = -0.1; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.n_documents = 3; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.min_paragraph_words = 9; s.max_paragraph_words = 4; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.holdout_fraction = 0.0; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.max_paragraphs_per_section = 0; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.profiles[1].name = s.profiles[0].name; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.profiles[1].cue = s.profiles[0].cue; }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.profiles[0].topic_words.clear(); }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.fillers.clear(); }).validate(), Error);
  REQUIRE_THROWS_AS(broken([](GeneratorSpec& s) { s.profiles.clear(); }).validate(), Error);
}

TEST_CASE("generated corpus round trips through the bench directory") {
  GeneratorSpec spec;
  spec.n_documents = 8;
  auto corpus = generate(spec);

  fs::path dir = fs::temp_directory_path() / "clozepet_bench_out";
  fs::remove_all(dir);
  write_generated(corpus, spec, dir.string());
  CHECK(fs::exists(dir / "train.jsonl"));
  CHECK(fs::exists(dir / "test.jsonl"));
  CHECK(fs::exists(dir / "spec.json"));

  auto train = load_paragraphs_jsonl((dir / "train.jsonl").string());
  REQUIRE(train.size() == corpus.train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    CHECK(train[i].doc_id == corpus.train[i].doc_id);
    CHECK(train[i].text == corpus.train[i].text);
    CHECK(train[i].label == corpus.train[i].label);
  }

  auto parsed = GeneratorSpec::from_json(nlohmann::json::parse(slurp(dir / "spec.json")));
  CHECK(parsed.seed == spec.seed);
  CHECK(parsed.n_documents == spec.n_documents);

  // A second write is byte-identical.
  auto first = slurp(dir / "train.jsonl");
  write_generated(corpus, spec, dir.string());
  CHECK(slurp(dir / "train.jsonl") == first);
  fs::remove_all(dir);
}
