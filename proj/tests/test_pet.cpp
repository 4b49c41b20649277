#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "clozepet/pet.hpp"

using namespace clozepet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("clozepet_pet_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

Vocabulary tiny_vocab(std::vector<std::string> words) {
  std::vector<std::string> toks = {Vocabulary::kPad, Vocabulary::kUnk,
                                   Vocabulary::kMask, Vocabulary::kSep,
                                   Vocabulary::kCls};
  for (auto& w : words) toks.push_back(std::move(w));
  return Vocabulary::from_tokens(std::move(toks));
}

Sample make_sample(std::string doc, int idx, std::string text,
                   std::string label = "") {
  Paragraph p;
  p.doc_id = std::move(doc);
  p.index = idx;
  p.text = std::move(text);
  p.label = std::move(label);
  return render_sample(p, std::nullopt, std::nullopt, ContextMode::NoContext);
}

// Two classes, each marked by one word that appears in every text of the
// class. Enough signal for a one-layer model in a handful of epochs.
struct Planted {
  Vocabulary vocab;
  Encoder base;
  FewShotBundle bundle;
  std::vector<Sample> holdout;
  PetConfig cfg;

  Planted()
      : vocab(tiny_vocab({"rot", "blau", "zimmer", "wasser", "tag", "nacht",
                          "und", "morgen", "abend", "licht", ":"})),
        base(make_config()) {
    base.init();

    const char* a_fill[] = {"zimmer", "tag", "morgen", "licht"};
    const char* b_fill[] = {"wasser", "nacht", "abend", "und"};
    int doc = 0;
    for (int i = 0; i < 4; ++i) {
      bundle.labeled.push_back(make_sample("d" + std::to_string(doc++), 0,
                                           std::string("rot ") + a_fill[i] +
                                               " " + a_fill[(i + 1) % 4],
                                           "A"));
      bundle.labeled.push_back(make_sample("d" + std::to_string(doc++), 0,
                                           std::string("blau ") + b_fill[i] +
                                               " " + b_fill[(i + 1) % 4],
                                           "B"));
    }
    for (int i = 0; i < 6; ++i) {
      bundle.unlabeled.push_back(make_sample("u" + std::to_string(i), 0,
                                             std::string(i % 2 ? "blau " : "rot ") +
                                                 a_fill[i % 4] + " " +
                                                 b_fill[(i + 2) % 4]));
    }
    for (int i = 0; i < 6; ++i) {
      bool red = i % 2 == 0;
      holdout.push_back(make_sample("h" + std::to_string(i), 0,
                                    std::string(red ? "rot " : "blau ") +
                                        b_fill[i % 4] + " " + a_fill[(i + 1) % 4],
                                    red ? "A" : "B"));
    }
    bundle.shot_size = 8;
    bundle.set_id = 1;
    bundle.seed = 99;

    cfg.templates = {parse_pattern("null", "SAMPLE [MASK]"),
                     parse_pattern("colon", "SAMPLE : [MASK]")};
    cfg.classes = {"A", "B"};
    cfg.verbalizer_mode = VerbalizerMode::Manual;
    cfg.manual_verbalizer.classes = {"A", "B"};
    cfg.manual_verbalizer.tokens = {"rot", "blau"};
    cfg.train.epochs = 12;
    cfg.train.batch_size = 4;
    cfg.train.seed = 5;
  }

  static EncoderConfig make_config() {
    EncoderConfig c;
    c.vocab_size = 16;
    c.hidden = 16;
    c.layers = 1;
    c.heads = 2;
    c.ffn = 32;
    c.max_len = 16;
    c.dropout = 0.0;
    c.seed = 7;
    return c;
  }
};

bool same_weights(const Encoder& a, const Encoder& b) {
  auto pa = const_cast<Encoder&>(a).parameters();
  auto pb = const_cast<Encoder&>(b).parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->w != pb[i]->w) return false;
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("mode and weighting names round trip") {
  CHECK(verbalizer_mode_name(VerbalizerMode::Petal) == "petal");
  CHECK(verbalizer_mode_name(VerbalizerMode::Manual) == "manual");
  CHECK(parse_verbalizer_mode("petal") == VerbalizerMode::Petal);
  CHECK(parse_verbalizer_mode("manual") == VerbalizerMode::Manual);
  REQUIRE_THROWS_AS(parse_verbalizer_mode("auto"), Error);

  CHECK(ensemble_weighting_name(EnsembleWeighting::Uniform) == "uniform");
  CHECK(ensemble_weighting_name(EnsembleWeighting::TrainAccuracy) == "train_accuracy");
  CHECK(parse_ensemble_weighting("uniform") == EnsembleWeighting::Uniform);
  CHECK(parse_ensemble_weighting("train_accuracy") == EnsembleWeighting::TrainAccuracy);
  REQUIRE_THROWS_AS(parse_ensemble_weighting("best"), Error);
}

TEST_CASE("pet config validation") {
  Planted p;
  REQUIRE_NOTHROW(p.cfg.validate());

  PetConfig c = p.cfg;
  c.templates.clear();
  REQUIRE_THROWS_AS(c.validate(), Error);

  c = p.cfg;
  c.classes.clear();
  REQUIRE_THROWS_AS(c.validate(), Error);

  c = p.cfg;
  c.distill_temperature = 0.0;
  REQUIRE_THROWS_AS(c.validate(), Error);

  c = p.cfg;
  c.train.epochs = 0;
  REQUIRE_THROWS_AS(c.validate(), Error);

  // Manual mode insists on the same class order in config and verbalizer.
  c = p.cfg;
  c.classes = {"B", "A"};
  REQUIRE_THROWS_AS(c.validate(), Error);

  // Petal mode ignores the manual verbalizer entirely.
  c = p.cfg;
  c.verbalizer_mode = VerbalizerMode::Petal;
  c.manual_verbalizer = Verbalizer{};
  REQUIRE_NOTHROW(c.validate());
}

TEST_CASE("pet config json round trip") {
  Planted p;
  PetConfig c = p.cfg;
  c.ensemble_weighting = EnsembleWeighting::TrainAccuracy;
  c.distill_temperature = 3.5;
  c.per_template_verbalizer = false;
  c.include_labeled_in_distill = false;
  c.candidate_filter.min_alpha_chars = 3;
  c.candidate_filter.top_k_frequency = 77;
  c.candidate_filter.require_alphabetic = false;
  c.train.epochs = 21;
  c.train.seed = 1234;

  auto j = c.to_json();
  auto back = PetConfig::from_json(j);
  CHECK(back.classes == c.classes);
  REQUIRE(back.templates.size() == c.templates.size());
  for (std::size_t i = 0; i < c.templates.size(); ++i) {
    CHECK(back.templates[i].name == c.templates[i].name);
    CHECK(back.templates[i].pattern() == c.templates[i].pattern());
  }
  CHECK(back.verbalizer_mode == c.verbalizer_mode);
  CHECK(back.ensemble_weighting == c.ensemble_weighting);
  CHECK(back.distill_temperature == c.distill_temperature);
  CHECK(back.per_template_verbalizer == c.per_template_verbalizer);
  CHECK(back.include_labeled_in_distill == c.include_labeled_in_distill);
  CHECK(back.candidate_filter.min_alpha_chars == 3);
  CHECK(back.candidate_filter.top_k_frequency == 77);
  CHECK(back.candidate_filter.require_alphabetic == false);
  CHECK(back.train.epochs == 21);
  CHECK(back.train.seed == 1234);
  CHECK(back.manual_verbalizer.classes == c.manual_verbalizer.classes);
  CHECK(back.manual_verbalizer.tokens == c.manual_verbalizer.tokens);

  // A manual-mode config without an explicit class list inherits the
  // verbalizer's classes.
  nlohmann::json sparse{
      {"templates", {{{"name", "null"}, {"pattern", "SAMPLE [MASK]"}}}},
      {"verbalizer_mode", "manual"},
      {"manual_verbalizer",
       {{"classes", {"A", "B"}}, {"tokens", {"rot", "blau"}}}}};
  auto filled = PetConfig::from_json(sparse);
  CHECK(filled.classes == std::vector<std::string>{"A", "B"});
  REQUIRE_NOTHROW(filled.validate());
}

TEST_CASE("class_index and sample_key") {
  std::vector<std::string> classes{"x", "y", "z"};
  CHECK(class_index(classes, "x") == 0u);
  CHECK(class_index(classes, "z") == 2u);
  REQUIRE_THROWS_AS(class_index(classes, "w"), Error);

  auto s = make_sample("doc7", 3, "rot tag");
  CHECK(sample_key(s) == "doc7#3");
}

TEST_CASE("temperature scaling") {
  std::vector<double> p{0.7, 0.2, 0.1};

  auto t1 = temperature_scale(p, 1.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(t1[i] == Catch::Approx(p[i]).epsilon(1e-12));
  }

  // T=2 flattens but keeps the ordering; exact values are sqrt-renormalized.
  auto t2 = temperature_scale(p, 2.0);
  double z = std::sqrt(0.7) + std::sqrt(0.2) + std::sqrt(0.1);
  CHECK(t2[0] == Catch::Approx(std::sqrt(0.7) / z).epsilon(1e-12));
  CHECK(t2[1] == Catch::Approx(std::sqrt(0.2) / z).epsilon(1e-12));
  CHECK(t2[2] == Catch::Approx(std::sqrt(0.1) / z).epsilon(1e-12));
  CHECK(t2[0] > t2[1]);
  CHECK(t2[1] > t2[2]);
  CHECK(t2[0] < p[0]);

  // Very high temperature approaches uniform.
  auto flat = temperature_scale(p, 1e4);
  for (double v : flat) CHECK(v == Catch::Approx(1.0 / 3).margin(1e-3));

  // Degenerate all-zero input falls back to uniform.
  auto uni = temperature_scale({0.0, 0.0}, 2.0);
  CHECK(uni[0] == 0.5);
  CHECK(uni[1] == 0.5);
}

TEST_CASE("attach_classifier_head copies shared tensors and seeds the rest") {
  Planted p;
  Encoder with_head = attach_classifier_head(p.base, 3);
  CHECK(with_head.config().n_classes == 3);

  std::map<std::string, const Tensor*> src;
  for (const auto* t : p.base.parameters()) src[t->name] = t;
  bool saw_fresh = false;
  for (auto* t : with_head.parameters()) {
    auto it = src.find(t->name);
    if (it != src.end()) {
      CHECK(t->w == it->second->w);
    } else {
      saw_fresh = true;
    }
  }
  CHECK(saw_fresh);

  // Re-heading with a different class count keeps the shared stack but
  // re-initializes the head.
  Encoder two = attach_classifier_head(with_head, 2);
  CHECK(two.config().n_classes == 2);
}

TEST_CASE("train_prompt_verbalizer guards") {
  Planted p;
  Encoder enc(p.base);
  std::vector<int> verb_ids = p.cfg.manual_verbalizer.token_ids(p.vocab);
  REQUIRE_THROWS_AS(train_prompt_verbalizer(enc, {}, {}, verb_ids, p.cfg.train),
                    Error);

  auto prompt = apply_pattern(p.cfg.templates[0], "rot tag", p.vocab, 16);
  REQUIRE_THROWS_AS(
      train_prompt_verbalizer(enc, {prompt}, {0, 1}, verb_ids, p.cfg.train),
      Error);
}

TEST_CASE("step1 produces one tuned model per template") {
  Planted p;
  auto models = pet_step1_finetune(p.base, p.vocab, p.bundle, p.cfg);
  REQUIRE(models.size() == 2u);
  CHECK(models[0].tmpl.name == "null");
  CHECK(models[1].tmpl.name == "colon");
  for (const auto& m : models) {
    CHECK(m.verbalizer.tokens == std::vector<std::string>{"rot", "blau"});
    REQUIRE(m.verbalizer_ids.size() == 2u);
    CHECK(m.stats.epoch_losses.size() == 12u);
    // Planted cue makes the few-shot train split trivially separable.
    CHECK(m.train_accuracy == 1.0);
    CHECK(m.stats.epoch_losses.front() > m.stats.epoch_losses.back());
  }
  CHECK_FALSE(same_weights(models[0].model, models[1].model));

  FewShotBundle empty = p.bundle;
  empty.labeled.clear();
  REQUIRE_THROWS_AS(pet_step1_finetune(p.base, p.vocab, empty, p.cfg), Error);
}

TEST_CASE("step1 is deterministic and thread count does not matter") {
  Planted p;
  auto a = pet_step1_finetune(p.base, p.vocab, p.bundle, p.cfg, 1);
  auto b = pet_step1_finetune(p.base, p.vocab, p.bundle, p.cfg, 2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tmpl.name == b[i].tmpl.name);
    CHECK(same_weights(a[i].model, b[i].model));
    CHECK(a[i].train_accuracy == b[i].train_accuracy);
    CHECK(a[i].stats.epoch_losses == b[i].stats.epoch_losses);
  }
}

TEST_CASE("step2 averages template logits") {
  Planted p;
  auto models = pet_step1_finetune(p.base, p.vocab, p.bundle, p.cfg);
  auto soft = pet_step2_soft_label(models, p.vocab, p.bundle.unlabeled, p.cfg);

  REQUIRE(soft.sample_ids.size() == p.bundle.unlabeled.size());
  CHECK(soft.classes == p.cfg.classes);
  CHECK(soft.template_names == std::vector<std::string>{"null", "colon"});
  REQUIRE(soft.weights.size() == 2u);
  CHECK(soft.weights[0] == 0.5);
  CHECK(soft.weights[1] == 0.5);
  REQUIRE_NOTHROW(soft.validate());

  for (std::size_t i = 0; i < p.bundle.unlabeled.size(); ++i) {
    const auto& s = p.bundle.unlabeled[i];
    CHECK(soft.sample_ids[i] == sample_key(s));
    std::vector<double> acc(2, 0.0);
    for (auto& m : models) {
      auto prompt = apply_pattern(m.tmpl, s.rendered, p.vocab, 16);
      auto logits = verbalizer_class_logits(m.model, prompt, m.verbalizer_ids);
      for (std::size_t c = 0; c < 2; ++c) acc[c] += 0.5 * logits[c];
    }
    auto want = softmax(acc);
    CHECK(soft.probs[i][0] == Catch::Approx(want[0]).epsilon(1e-12));
    CHECK(soft.probs[i][1] == Catch::Approx(want[1]).epsilon(1e-12));
  }

  // The planted cue should drive the soft labels in the right direction.
  for (std::size_t i = 0; i < soft.probs.size(); ++i) {
    std::size_t cue = i % 2 ? 1 : 0;  // u<i> alternates rot/blau
    CHECK(soft.probs[i][cue] > 0.5);
  }

  REQUIRE_THROWS_AS(pet_step2_soft_label(models, p.vocab, {}, p.cfg), Error);
  std::vector<TemplateModel> none;
  REQUIRE_THROWS_AS(pet_step2_soft_label(none, p.vocab, p.bundle.unlabeled, p.cfg),
                    Error);
}

TEST_CASE("single-template ensemble is that template's softmax") {
  Planted p;
  PetConfig one = p.cfg;
  one.templates = {p.cfg.templates[0]};
  auto models = pet_step1_finetune(p.base, p.vocab, p.bundle, one);
  auto soft = pet_step2_soft_label(models, p.vocab, p.bundle.unlabeled, one);
  REQUIRE(soft.weights.size() == 1u);
  CHECK(soft.weights[0] == 1.0);
  for (std::size_t i = 0; i < p.bundle.unlabeled.size(); ++i) {
    auto prompt = apply_pattern(models[0].tmpl, p.bundle.unlabeled[i].rendered,
                                p.vocab, 16);
    auto want = softmax(
        verbalizer_class_logits(models[0].model, prompt, models[0].verbalizer_ids));
    CHECK(soft.probs[i][0] == Catch::Approx(want[0]).epsilon(1e-12));
    CHECK(soft.probs[i][1] == Catch::Approx(want[1]).epsilon(1e-12));
  }
}

TEST_CASE("ensemble weights") {
  Planted p;
  auto models = pet_step1_finetune(p.base, p.vocab, p.bundle, p.cfg);

  auto uni = ensemble_weights(models, EnsembleWeighting::Uniform);
  CHECK(uni == std::vector<double>{0.5, 0.5});

  models[0].train_accuracy = 0.75;
  models[1].train_accuracy = 0.25;
  auto acc = ensemble_weights(models, EnsembleWeighting::TrainAccuracy);
  CHECK(acc[0] == Catch::Approx(0.75).epsilon(1e-12));
  CHECK(acc[1] == Catch::Approx(0.25).epsilon(1e-12));

  // All-zero accuracies fall back to uniform.
  models[0].train_accuracy = 0.0;
  models[1].train_accuracy = 0.0;
  auto fallback = ensemble_weights(models, EnsembleWeighting::TrainAccuracy);
  CHECK(fallback == std::vector<double>{0.5, 0.5});
}

TEST_CASE("soft label set validation") {
  SoftLabelSet s;
  s.classes = {"A", "B"};
  s.sample_ids = {"a#0", "b#0"};
  s.probs = {{0.25, 0.75}, {0.5, 0.5}};
  REQUIRE_NOTHROW(s.validate());

  SoftLabelSet bad = s;
  bad.sample_ids.pop_back();
  REQUIRE_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.probs[0] = {1.0};
  REQUIRE_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.probs[0] = {-0.25, 1.25};
  REQUIRE_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.probs[0] = {0.4, 0.4};
  REQUIRE_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.template_names = {"null", "colon"};
  bad.weights = {1.0};
  REQUIRE_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.template_names = {"null", "colon"};
  bad.weights = {0.9, 0.9};
  REQUIRE_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("soft labels csv round trip") {
  TempDir dir;
  SoftLabelSet s;
  s.classes = {"A", "B", "C"};
  s.sample_ids = {"doc1#0", "doc2#4"};
  s.probs = {{0.123456789012345, 0.5, 0.376543210987655},
             {1.0 / 3, 1.0 / 3, 1.0 / 3}};
  auto path = (dir.path / "soft.csv").string();
  write_soft_labels_csv(s, path);

  auto back = read_soft_labels_csv(path);
  CHECK(back.classes == s.classes);
  CHECK(back.sample_ids == s.sample_ids);
  REQUIRE(back.probs.size() == 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(back.probs[i][c] == s.probs[i][c]);  // %.17g keeps doubles exact
    }
  }

  std::ofstream(dir.path / "bad_header.csv") << "id,A,B\nx#0,0.5,0.5\n";
  REQUIRE_THROWS_AS(read_soft_labels_csv((dir.path / "bad_header.csv").string()),
                    Error);
  std::ofstream(dir.path / "ragged.csv") << "sample_id,A,B\nx#0,0.5\n";
  REQUIRE_THROWS_AS(read_soft_labels_csv((dir.path / "ragged.csv").string()),
                    Error);
  REQUIRE_THROWS_AS(read_soft_labels_csv((dir.path / "missing.csv").string()),
                    Error);
}

TEST_CASE("distillation guards and labeled handling") {
  Planted p;
  auto models = pet_step1_finetune(p.base, p.vocab, p.bundle, p.cfg);
  auto soft = pet_step2_soft_label(models, p.vocab, p.bundle.unlabeled, p.cfg);
  std::vector<std::string> texts;
  for (const auto& s : p.bundle.unlabeled) texts.push_back(s.rendered);

  SoftLabelSet empty;
  REQUIRE_THROWS_AS(pet_step3_distill(p.base, p.vocab, empty, {}, p.cfg), Error);

  auto short_texts = texts;
  short_texts.pop_back();
  REQUIRE_THROWS_AS(pet_step3_distill(p.base, p.vocab, soft, short_texts, p.cfg),
                    Error);

  REQUIRE_THROWS_AS(
      pet_step3_distill(p.base, p.vocab, soft, texts, p.cfg, {"rot tag"}, {}),
      Error);

  // With include_labeled_in_distill off the labeled set is ignored, so the
  // result matches a run that never saw it.
  PetConfig no_lab = p.cfg;
  no_lab.include_labeled_in_distill = false;
  Encoder without = pet_step3_distill(p.base, p.vocab, soft, texts, no_lab,
                                      {"rot tag"}, {0});
  Encoder baseline = pet_step3_distill(p.base, p.vocab, soft, texts, no_lab);
  CHECK(same_weights(without, baseline));

  Encoder with_lab = pet_step3_distill(p.base, p.vocab, soft, texts, p.cfg,
                                       {"rot tag"}, {0});
  CHECK_FALSE(same_weights(with_lab, baseline));
  CHECK(with_lab.config().n_classes == 2);
}

TEST_CASE("full pet run beats chance and writes its artifacts") {
  Planted p;
  TempDir dir;
  auto art = run_pet(p.base, p.vocab, p.bundle, p.holdout, p.cfg, dir.str());

  CHECK(art.metrics.accuracy > 0.5);
  CHECK(art.metrics.metadata.method == "pet");
  CHECK(art.metrics.metadata.seed == 5);
  CHECK(art.metrics.metadata.set_id == 1);
  CHECK(art.metrics.metadata.shot_size == 8);
  REQUIRE(art.template_train_accuracy.size() == 2u);
  CHECK(art.soft_labels.sample_ids.size() == p.bundle.unlabeled.size());

  CHECK(fs::exists(dir.path / "run.json"));
  CHECK(fs::exists(dir.path / "step1" / "null" / "checkpoint"));
  CHECK(fs::exists(dir.path / "step1" / "null" / "verbalizer.txt"));
  CHECK(fs::exists(dir.path / "step1" / "colon" / "checkpoint"));
  CHECK(fs::exists(dir.path / "step1" / "colon" / "verbalizer.txt"));
  CHECK(fs::exists(dir.path / "step2" / "soft_labels.csv"));
  CHECK(fs::exists(dir.path / "final" / "checkpoint"));
  CHECK(fs::exists(dir.path / "metrics.json"));

  auto run = nlohmann::json::parse(slurp(dir.path / "run.json"));
  CHECK(run.at("bundle").at("shot_size") == 8);
  CHECK(run.at("bundle").at("set_id") == 1);
  CHECK(run.at("bundle").at("n_labeled") == 8);
  CHECK(run.at("bundle").at("n_unlabeled") == 6);
  CHECK(run.at("ensemble").at("templates") ==
        nlohmann::json({"null", "colon"}));
  CHECK(run.at("pet").at("verbalizer_mode") == "manual");

  CHECK(slurp(dir.path / "step1" / "null" / "verbalizer.txt") ==
        "A = rot\nB = blau\n");

  auto soft = read_soft_labels_csv((dir.path / "step2" / "soft_labels.csv").string());
  REQUIRE(soft.probs.size() == art.soft_labels.probs.size());
  for (std::size_t i = 0; i < soft.probs.size(); ++i) {
    CHECK(soft.probs[i] == art.soft_labels.probs[i]);
  }

  auto reloaded = read_metrics_json((dir.path / "metrics.json").string());
  CHECK(reloaded.accuracy == art.metrics.accuracy);
  CHECK(reloaded.metadata.method == "pet");

  auto loaded = load_checkpoint((dir.path / "final" / "checkpoint").string());
  CHECK(same_weights(loaded.encoder, art.final_model));
  for (const auto& s : p.holdout) {
    auto a = classify_probs(loaded.encoder, loaded.vocab, s.rendered);
    auto b = classify_probs(art.final_model, p.vocab, s.rendered);
    CHECK(a == b);
  }
}

TEST_CASE("pet run is reproducible") {
  Planted p;
  auto a = run_pet(p.base, p.vocab, p.bundle, p.holdout, p.cfg);
  auto b = run_pet(p.base, p.vocab, p.bundle, p.holdout, p.cfg);
  CHECK(a.metrics.accuracy == b.metrics.accuracy);
  CHECK(a.metrics.macro_f1 == b.metrics.macro_f1);
  CHECK(same_weights(a.final_model, b.final_model));
  REQUIRE(a.soft_labels.probs.size() == b.soft_labels.probs.size());
  for (std::size_t i = 0; i < a.soft_labels.probs.size(); ++i) {
    CHECK(a.soft_labels.probs[i] == b.soft_labels.probs[i]);
  }

  REQUIRE_THROWS_AS(run_pet(p.base, p.vocab, p.bundle, {}, p.cfg), Error);
}

TEST_CASE("petal-mode pet run works end to end") {
  Planted p;
  PetConfig cfg = p.cfg;
  cfg.verbalizer_mode = VerbalizerMode::Petal;
  cfg.manual_verbalizer = Verbalizer{};
  TempDir dir;
  auto art = run_pet(p.base, p.vocab, p.bundle, p.holdout, cfg, dir.str());
  // The searched verbalizer is data-dependent; the run must still produce a
  // bijective assignment and a coherent artifact tree.
  auto text = slurp(dir.path / "step1" / "null" / "verbalizer.txt");
  auto verb = parse_verbalizer(text);
  CHECK(verb.classes == cfg.classes);
  CHECK(verb.tokens[0] != verb.tokens[1]);
  CHECK(art.metrics.metadata.method == "pet");

  // Shared-verbalizer mode: both templates must report the same tokens.
  cfg.per_template_verbalizer = false;
  TempDir dir2;
  run_pet(p.base, p.vocab, p.bundle, p.holdout, cfg, dir2.str());
  CHECK(slurp(dir2.path / "step1" / "null" / "verbalizer.txt") ==
        slurp(dir2.path / "step1" / "colon" / "verbalizer.txt"));
}

TEST_CASE("supervised baseline run") {
  Planted p;
  TempDir dir;
  std::vector<Sample> train = p.bundle.labeled;
  TrainConfig tcfg = p.cfg.train;
  tcfg.epochs = 20;
  auto art = run_sc(p.base, p.vocab, train, p.holdout, p.cfg.classes, tcfg,
                    dir.str());
  CHECK(art.metrics.metadata.method == "sc");
  CHECK(art.metrics.accuracy >= 0.5);
  CHECK(art.model.config().n_classes == 2);
  CHECK(fs::exists(dir.path / "run.json"));
  CHECK(fs::exists(dir.path / "final" / "checkpoint"));
  CHECK(fs::exists(dir.path / "metrics.json"));
  auto run = nlohmann::json::parse(slurp(dir.path / "run.json"));
  CHECK(run.at("method") == "sc");
  CHECK(run.at("n_train") == 8);

  REQUIRE_THROWS_AS(run_sc(p.base, p.vocab, {}, p.holdout, p.cfg.classes, tcfg),
                    Error);
  REQUIRE_THROWS_AS(run_sc(p.base, p.vocab, train, {}, p.cfg.classes, tcfg),
                    Error);
}

TEST_CASE("zero-shot evaluation uses the verbalizer directly") {
  Planted p;

  // Tune one model on the planted cue, then score zero-shot style.
  auto models = pet_step1_finetune(p.base, p.vocab, p.bundle, p.cfg);
  auto metrics = run_zero_shot(models[0].model, p.vocab, p.cfg.manual_verbalizer,
                               models[0].tmpl, p.holdout);
  CHECK(metrics.metadata.method == "zero-shot");
  CHECK(metrics.accuracy > 0.5);

  // Swapping the verbalizer tokens flips every decision.
  Verbalizer swapped = p.cfg.manual_verbalizer;
  std::swap(swapped.tokens[0], swapped.tokens[1]);
  auto flipped = run_zero_shot(models[0].model, p.vocab, swapped,
                               models[0].tmpl, p.holdout);
  CHECK(flipped.accuracy == Catch::Approx(1.0 - metrics.accuracy).margin(1e-12));

  REQUIRE_THROWS_AS(run_zero_shot(models[0].model, p.vocab,
                                  p.cfg.manual_verbalizer, models[0].tmpl, {}),
                    Error);
}
