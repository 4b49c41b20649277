#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "clozepet/corpus.hpp"
#include "clozepet/csv.hpp"
#include "clozepet/error.hpp"
#include "clozepet/eval.hpp"
#include "clozepet/model.hpp"
#include "clozepet/prompting.hpp"
#include "clozepet/train.hpp"

#include "json.hpp"

namespace clozepet {

enum class VerbalizerMode { Petal, Manual };
enum class EnsembleWeighting { Uniform, TrainAccuracy };

inline std::string verbalizer_mode_name(VerbalizerMode m) {
  return m == VerbalizerMode::Petal ? "petal" : "manual";
}

inline VerbalizerMode parse_verbalizer_mode(const std::string& s) {
  if (s == "petal") return VerbalizerMode::Petal;
  if (s == "manual") return VerbalizerMode::Manual;
  throw Error(ErrorCode::InvalidConfig, "unknown verbalizer mode '" + s + "'");
}

inline std::string ensemble_weighting_name(EnsembleWeighting w) {
  return w == EnsembleWeighting::Uniform ? "uniform" : "train_accuracy";
}

inline EnsembleWeighting parse_ensemble_weighting(const std::string& s) {
  if (s == "uniform") return EnsembleWeighting::Uniform;
  if (s == "train_accuracy") return EnsembleWeighting::TrainAccuracy;
  throw Error(ErrorCode::InvalidConfig, "unknown ensemble weighting '" + s + "'");
}

struct PetConfig {
  std::vector<PatternTemplate> templates;
  std::vector<std::string> classes;
  VerbalizerMode verbalizer_mode = VerbalizerMode::Petal;
  EnsembleWeighting ensemble_weighting = EnsembleWeighting::Uniform;
  double distill_temperature = 2.0;
  TrainConfig train;
  Verbalizer manual_verbalizer;        // only read in manual mode
  bool per_template_verbalizer = true; // petal: search once per template
  bool include_labeled_in_distill = true;
  CandidateFilter candidate_filter;

  void validate() const {
    if (templates.empty()) throw Error(ErrorCode::InvalidConfig, "need at least one template");
    for (const auto& t : templates) t.validate();
    if (classes.empty()) throw Error(ErrorCode::InvalidConfig, "need a class list");
    if (!(distill_temperature > 0.0)) {
      throw Error(ErrorCode::InvalidConfig, "distill_temperature must be positive");
    }
    train.validate();
    if (verbalizer_mode == VerbalizerMode::Manual) {
      manual_verbalizer.validate();
      if (manual_verbalizer.classes != classes) {
        throw Error(ErrorCode::InvalidConfig,
                    "manual verbalizer classes must match the configured class order");
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json tpl = nlohmann::json::array();
    for (const auto& t : templates) {
      tpl.push_back({{"name", t.name}, {"pattern", t.pattern()}});
    }
    nlohmann::json j{{"templates", tpl},
                     {"classes", classes},
                     {"verbalizer_mode", verbalizer_mode_name(verbalizer_mode)},
                     {"ensemble_weighting", ensemble_weighting_name(ensemble_weighting)},
                     {"distill_temperature", distill_temperature},
                     {"train", train.to_json()},
                     {"per_template_verbalizer", per_template_verbalizer},
                     {"include_labeled_in_distill", include_labeled_in_distill},
                     {"candidate_filter",
                      {{"min_alpha_chars", candidate_filter.min_alpha_chars},
                       {"top_k_frequency", candidate_filter.top_k_frequency},
                       {"require_alphabetic", candidate_filter.require_alphabetic}}}};
    if (verbalizer_mode == VerbalizerMode::Manual) {
      j["manual_verbalizer"] = {{"classes", manual_verbalizer.classes},
                                {"tokens", manual_verbalizer.tokens}};
    }
    return j;
  }

  static PetConfig from_json(const nlohmann::json& j) {
    PetConfig c;
    if (j.contains("templates")) {
      c.templates.clear();
      for (const auto& tj : j.at("templates")) {
        c.templates.push_back(parse_pattern(tj.at("name").get<std::string>(),
                                            tj.at("pattern").get<std::string>()));
      }
    }
    if (j.contains("classes")) c.classes = j.at("classes").get<std::vector<std::string>>();
    if (j.contains("verbalizer_mode")) {
      c.verbalizer_mode = parse_verbalizer_mode(j.at("verbalizer_mode").get<std::string>());
    }
    if (j.contains("ensemble_weighting")) {
      c.ensemble_weighting =
          parse_ensemble_weighting(j.at("ensemble_weighting").get<std::string>());
    }
    c.distill_temperature = j.value("distill_temperature", c.distill_temperature);
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    c.per_template_verbalizer = j.value("per_template_verbalizer", c.per_template_verbalizer);
    c.include_labeled_in_distill =
        j.value("include_labeled_in_distill", c.include_labeled_in_distill);
    if (j.contains("candidate_filter")) {
      const auto& f = j.at("candidate_filter");
      c.candidate_filter.min_alpha_chars =
          f.value("min_alpha_chars", c.candidate_filter.min_alpha_chars);
      c.candidate_filter.top_k_frequency =
          f.value("top_k_frequency", c.candidate_filter.top_k_frequency);
      c.candidate_filter.require_alphabetic =
          f.value("require_alphabetic", c.candidate_filter.require_alphabetic);
    }
    if (j.contains("manual_verbalizer")) {
      const auto& v = j.at("manual_verbalizer");
      c.manual_verbalizer.classes = v.at("classes").get<std::vector<std::string>>();
      c.manual_verbalizer.tokens = v.at("tokens").get<std::vector<std::string>>();
      if (c.classes.empty()) c.classes = c.manual_verbalizer.classes;
    }
    return c;
  }
};

inline std::size_t class_index(const std::vector<std::string>& classes,
                               const std::string& label) {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] == label) return i;
  }
  throw Error(ErrorCode::UnknownLabel, "label '" + label + "' not in class list");
}

inline std::string sample_key(const Sample& s) {
  return s.main.doc_id + "#" + std::to_string(s.main.index);
}

// ---------------------------------------------------------------------------
// Step 1: one verbalizer-loss fine-tune per template.

struct TemplateModel {
  PatternTemplate tmpl;
  Encoder model;
  Verbalizer verbalizer;
  std::vector<int> verbalizer_ids;
  double train_accuracy = 0.0;
  TrainStats stats;
};

// Fine-tunes on already-encoded prompts. A prompt with several masks
// contributes one loss term per mask position; batch loss is the mean over
// terms.
inline TrainStats train_prompt_verbalizer(Encoder& enc,
                                          const std::vector<PromptEncoding>& prompts,
                                          const std::vector<std::size_t>& gold,
                                          const std::vector<int>& verbalizer_ids,
                                          const TrainConfig& cfg) {
  cfg.validate();
  if (prompts.empty()) throw Error(ErrorCode::EmptyCorpus, "no prompts to train on");
  if (prompts.size() != gold.size()) {
    throw Error(ErrorCode::LengthMismatch, "prompts and labels differ in length");
  }
  Adam opt(enc.parameters(), cfg);
  Rng drop_rng(derive_seed(cfg.seed, seeds::kDropout));
  enc.set_train_rng(&drop_rng);
  TrainStats stats;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(prompts.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, seeds::kShuffle, static_cast<std::uint64_t>(e)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_terms = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.step_span()) {
      std::size_t stop = std::min(order.size(), start + cfg.step_span());
      enc.zero_grad();
      std::size_t terms = 0;
      for (std::size_t b = start; b < stop; ++b) {
        std::size_t idx = order[b];
        for (auto pos : prompts[idx].mask_positions) {
          epoch_loss += verbalizer_loss_and_grad(enc, prompts[idx].ids, pos,
                                                 verbalizer_ids, gold[idx]);
          ++terms;
        }
      }
      opt.step(1.0 / static_cast<double>(terms));
      epoch_terms += terms;
    }
    stats.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_terms));
  }
  enc.set_train_rng(nullptr);
  return stats;
}

namespace detail {

inline std::vector<std::string> rendered_texts(const std::vector<Sample>& samples) {
  std::vector<std::string> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.rendered);
  return out;
}

inline TemplateModel finetune_one_template(const Encoder& base, const Vocabulary& vocab,
                                           const PatternTemplate& tmpl,
                                           const FewShotBundle& bundle,
                                           const PetConfig& cfg,
                                           const Verbalizer* shared_verbalizer) {
  Encoder enc(base);
  Verbalizer verb;
  if (cfg.verbalizer_mode == VerbalizerMode::Manual) {
    verb = cfg.manual_verbalizer;
  } else if (shared_verbalizer != nullptr) {
    verb = *shared_verbalizer;
  } else {
    verb = petal_select(enc, vocab, tmpl, rendered_texts(bundle.labeled),
                        [&] {
                          std::vector<std::string> labels;
                          labels.reserve(bundle.labeled.size());
                          for (const auto& s : bundle.labeled) labels.push_back(s.main.label);
                          return labels;
                        }(),
                        cfg.classes, cfg.candidate_filter,
                        rendered_texts(bundle.unlabeled));
  }
  auto verb_ids = verb.token_ids(vocab);

  std::vector<PromptEncoding> prompts;
  std::vector<std::size_t> gold;
  prompts.reserve(bundle.labeled.size());
  gold.reserve(bundle.labeled.size());
  for (const auto& s : bundle.labeled) {
    prompts.push_back(apply_pattern(tmpl, s.rendered, vocab, enc.config().max_len));
    gold.push_back(class_index(cfg.classes, s.main.label));
  }
  auto stats = train_prompt_verbalizer(enc, prompts, gold, verb_ids, cfg.train);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto logits = verbalizer_class_logits(enc, prompts[i], verb_ids);
    std::size_t arg = 0;
    for (std::size_t c = 1; c < logits.size(); ++c) {
      if (logits[c] > logits[arg]) arg = c;
    }
    if (arg == gold[i]) ++correct;
  }
  double acc = static_cast<double>(correct) / static_cast<double>(prompts.size());
  return TemplateModel{tmpl, std::move(enc), std::move(verb), std::move(verb_ids), acc,
                       std::move(stats)};
}

}  // namespace detail

// Template fine-tunes are independent; jobs > 1 runs them on worker
// threads, each owning its own model copy. Results are slotted by template
// index, so the output order never depends on scheduling.
inline std::vector<TemplateModel> pet_step1_finetune(const Encoder& base,
                                                     const Vocabulary& vocab,
                                                     const FewShotBundle& bundle,
                                                     const PetConfig& cfg, int jobs = 1) {
  cfg.validate();
  if (bundle.labeled.empty()) {
    throw Error(ErrorCode::EmptyCorpus, "bundle has no labeled samples");
  }
  std::unique_ptr<Verbalizer> shared;
  if (cfg.verbalizer_mode == VerbalizerMode::Petal && !cfg.per_template_verbalizer) {
    Encoder scratch(base);
    std::vector<std::string> labels;
    for (const auto& s : bundle.labeled) labels.push_back(s.main.label);
    shared = std::make_unique<Verbalizer>(petal_select(
        scratch, vocab, cfg.templates.front(), detail::rendered_texts(bundle.labeled),
        labels, cfg.classes, cfg.candidate_filter, detail::rendered_texts(bundle.unlabeled)));
  }

  const std::size_t n = cfg.templates.size();
  std::vector<std::unique_ptr<TemplateModel>> slots(n);
  auto work = [&](std::size_t i) {
    slots[i] = std::make_unique<TemplateModel>(detail::finetune_one_template(
        base, vocab, cfg.templates[i], bundle, cfg, shared.get()));
  };
  int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) {
      threads.emplace_back([&, t]() {
        try {
          for (std::size_t i = static_cast<std::size_t>(t); i < n;
               i += static_cast<std::size_t>(workers)) {
            work(i);
          }
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<TemplateModel> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

// ---------------------------------------------------------------------------
// Step 2: ensemble soft labels.

struct SoftLabelSet {
  std::vector<std::string> classes;
  std::vector<std::string> sample_ids;
  std::vector<std::vector<double>> probs;
  std::vector<std::string> template_names;
  std::vector<double> weights;

  void validate() const {
    if (sample_ids.size() != probs.size()) {
      throw Error(ErrorCode::LengthMismatch, "ids and probability rows differ in length");
    }
    for (const auto& row : probs) {
      if (row.size() != classes.size()) {
        throw Error(ErrorCode::MalformedTarget, "probability row has wrong width");
      }
      double sum = 0.0;
      for (double v : row) {
        if (v < 0.0) throw Error(ErrorCode::MalformedTarget, "negative probability");
        sum += v;
      }
      if (std::fabs(sum - 1.0) > 1e-6) {
        throw Error(ErrorCode::MalformedTarget, "probability row does not sum to 1");
      }
    }
    if (!weights.empty()) {
      if (weights.size() != template_names.size()) {
        throw Error(ErrorCode::LengthMismatch, "weights and template names differ in length");
      }
      double sum = 0.0;
      for (double w : weights) sum += w;
      if (std::fabs(sum - 1.0) > 1e-6) {
        throw Error(ErrorCode::MalformedTarget, "ensemble weights do not sum to 1");
      }
    }
  }
};

inline std::vector<double> ensemble_weights(const std::vector<TemplateModel>& models,
                                            EnsembleWeighting mode) {
  std::vector<double> w(models.size(), 1.0 / static_cast<double>(models.size()));
  if (mode == EnsembleWeighting::TrainAccuracy) {
    double total = 0.0;
    for (const auto& m : models) total += m.train_accuracy;
    if (total > 0.0) {
      for (std::size_t i = 0; i < models.size(); ++i) {
        w[i] = models[i].train_accuracy / total;
      }
    }
  }
  return w;
}

inline SoftLabelSet pet_step2_soft_label(std::vector<TemplateModel>& models,
                                         const Vocabulary& vocab,
                                         const std::vector<Sample>& unlabeled,
                                         const PetConfig& cfg) {
  if (models.empty()) throw Error(ErrorCode::InvalidConfig, "no fine-tuned template models");
  if (unlabeled.empty()) throw Error(ErrorCode::EmptyUnlabeled, "no unlabeled samples");
  SoftLabelSet out;
  out.classes = cfg.classes;
  out.weights = ensemble_weights(models, cfg.ensemble_weighting);
  for (const auto& m : models) out.template_names.push_back(m.tmpl.name);
  out.sample_ids.reserve(unlabeled.size());
  out.probs.reserve(unlabeled.size());
  for (const auto& s : unlabeled) {
    std::vector<double> acc(cfg.classes.size(), 0.0);
    for (std::size_t m = 0; m < models.size(); ++m) {
      auto prompt = apply_pattern(models[m].tmpl, s.rendered, vocab,
                                  models[m].model.config().max_len);
      auto logits = verbalizer_class_logits(models[m].model, prompt,
                                            models[m].verbalizer_ids);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += out.weights[m] * logits[c];
    }
    out.sample_ids.push_back(sample_key(s));
    out.probs.push_back(softmax(acc));
  }
  out.validate();
  return out;
}

inline void write_soft_labels_csv(const SoftLabelSet& soft, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  std::vector<std::string> header{"sample_id"};
  header.insert(header.end(), soft.classes.begin(), soft.classes.end());
  out << csv::format_row(header);
  char buf[32];
  for (std::size_t i = 0; i < soft.probs.size(); ++i) {
    std::vector<std::string> row{soft.sample_ids[i]};
    for (double p : soft.probs[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", p);
      row.push_back(buf);
    }
    out << csv::format_row(row);
  }
}

inline SoftLabelSet read_soft_labels_csv(const std::string& path) {
  auto rows = csv::read_file(path);
  if (rows.empty()) throw Error(ErrorCode::IoError, "empty soft label file " + path);
  SoftLabelSet out;
  const auto& header = rows.front();
  if (header.empty() || header[0] != "sample_id") {
    throw Error(ErrorCode::IoError, "bad soft label header in " + path);
  }
  out.classes.assign(header.begin() + 1, header.end());
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != header.size()) {
      throw Error(ErrorCode::IoError, "ragged soft label row in " + path);
    }
    out.sample_ids.push_back(rows[r][0]);
    std::vector<double> p;
    for (std::size_t c = 1; c < rows[r].size(); ++c) p.push_back(std::stod(rows[r][c]));
    out.probs.push_back(std::move(p));
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Step 3: distill the ensemble into one classifier.

// Fresh encoder with a classifier head: every tensor shared with the base
// keeps the base's weights; tensors the base lacks (or whose shape differs)
// keep their fresh seeded init.
inline Encoder attach_classifier_head(const Encoder& base, int n_classes) {
  EncoderConfig cfg = base.config();
  cfg.n_classes = n_classes;
  Encoder out(cfg);
  out.init();
  std::map<std::string, const Tensor*> src;
  for (const auto* t : base.parameters()) src[t->name] = t;
  for (auto* t : out.parameters()) {
    auto it = src.find(t->name);
    if (it != src.end() && it->second->rows == t->rows && it->second->cols == t->cols) {
      t->w = it->second->w;
    }
  }
  return out;
}

inline std::vector<double> temperature_scale(const std::vector<double>& p, double T) {
  std::vector<double> q(p.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    q[i] = std::pow(std::max(p[i], 0.0), 1.0 / T);
    sum += q[i];
  }
  if (sum <= 0.0) {
    std::fill(q.begin(), q.end(), 1.0 / static_cast<double>(p.size()));
    return q;
  }
  for (double& v : q) v /= sum;
  return q;
}

inline Encoder pet_step3_distill(const Encoder& base, const Vocabulary& vocab,
                                 const SoftLabelSet& soft,
                                 const std::vector<std::string>& unlabeled_texts,
                                 const PetConfig& cfg,
                                 const std::vector<std::string>& labeled_texts = {},
                                 const std::vector<std::size_t>& labeled_classes = {}) {
  if (soft.probs.empty()) throw Error(ErrorCode::EmptyUnlabeled, "no soft labels");
  if (soft.probs.size() != unlabeled_texts.size()) {
    throw Error(ErrorCode::LengthMismatch, "soft labels and texts differ in length");
  }
  std::vector<std::string> texts = unlabeled_texts;
  std::vector<std::vector<double>> targets;
  targets.reserve(soft.probs.size() + labeled_texts.size());
  for (const auto& p : soft.probs) {
    targets.push_back(temperature_scale(p, cfg.distill_temperature));
  }
  if (cfg.include_labeled_in_distill && !labeled_texts.empty()) {
    if (labeled_texts.size() != labeled_classes.size()) {
      throw Error(ErrorCode::LengthMismatch, "labeled texts and classes differ in length");
    }
    for (std::size_t i = 0; i < labeled_texts.size(); ++i) {
      texts.push_back(labeled_texts[i]);
      targets.push_back(one_hot(cfg.classes.size(), labeled_classes[i]));
    }
  }
  Encoder enc = attach_classifier_head(base, static_cast<int>(cfg.classes.size()));
  train_classifier_soft(enc, vocab, texts, targets, cfg.train);
  return enc;
}

// ---------------------------------------------------------------------------
// Whole-pipeline runners.

inline MetricsReport evaluate_classifier(Encoder& enc, const Vocabulary& vocab,
                                         const std::vector<Sample>& holdout,
                                         const std::vector<std::string>& classes) {
  if (holdout.empty()) throw Error(ErrorCode::EmptyEvaluation, "empty holdout");
  std::vector<std::string> gold, pred;
  gold.reserve(holdout.size());
  pred.reserve(holdout.size());
  for (const auto& s : holdout) {
    auto p = classify_probs(enc, vocab, s.rendered);
    std::size_t arg = 0;
    for (std::size_t c = 1; c < p.size(); ++c) {
      if (p[c] > p[arg]) arg = c;
    }
    gold.push_back(s.main.label);
    pred.push_back(classes[arg]);
  }
  return compute_metrics(gold, pred, classes);
}

struct PetRunArtifacts {
  Encoder final_model;
  MetricsReport metrics;
  SoftLabelSet soft_labels;
  std::vector<double> template_train_accuracy;
};

inline PetRunArtifacts run_pet(const Encoder& base, const Vocabulary& vocab,
                               const FewShotBundle& bundle,
                               const std::vector<Sample>& holdout, const PetConfig& cfg,
                               const std::string& run_dir = "", int jobs = 1) {
  cfg.validate();
  if (holdout.empty()) throw Error(ErrorCode::EmptyEvaluation, "empty holdout");
  namespace fs = std::filesystem;

  auto models = pet_step1_finetune(base, vocab, bundle, cfg, jobs);
  auto soft = pet_step2_soft_label(models, vocab, bundle.unlabeled, cfg);

  std::vector<std::string> labeled_texts;
  std::vector<std::size_t> labeled_classes;
  for (const auto& s : bundle.labeled) {
    labeled_texts.push_back(s.rendered);
    labeled_classes.push_back(class_index(cfg.classes, s.main.label));
  }
  Encoder final_model = pet_step3_distill(base, vocab, soft,
                                          detail::rendered_texts(bundle.unlabeled), cfg,
                                          labeled_texts, labeled_classes);
  MetricsReport metrics = evaluate_classifier(final_model, vocab, holdout, cfg.classes);
  metrics.metadata.seed = static_cast<std::int64_t>(cfg.train.seed);
  metrics.metadata.set_id = bundle.set_id;
  metrics.metadata.shot_size = bundle.shot_size;
  metrics.metadata.method = "pet";

  PetRunArtifacts art{std::move(final_model), std::move(metrics), std::move(soft), {}};
  for (const auto& m : models) art.template_train_accuracy.push_back(m.train_accuracy);

  if (!run_dir.empty()) {
    fs::create_directories(run_dir);
    nlohmann::json run{{"pet", cfg.to_json()},
                       {"bundle",
                        {{"shot_size", bundle.shot_size},
                         {"set_id", bundle.set_id},
                         {"seed", bundle.seed},
                         {"n_labeled", bundle.labeled.size()},
                         {"n_unlabeled", bundle.unlabeled.size()}}},
                       {"ensemble",
                        {{"templates", art.soft_labels.template_names},
                         {"weights", art.soft_labels.weights},
                         {"train_accuracy", art.template_train_accuracy}}}};
    std::ofstream(fs::path(run_dir) / "run.json", std::ios::binary)
        << run.dump(2) << "\n";
    for (const auto& m : models) {
      fs::path dir = fs::path(run_dir) / "step1" / m.tmpl.name;
      fs::create_directories(dir);
      save_checkpoint((dir / "checkpoint").string(), m.model, vocab);
      std::ofstream(dir / "verbalizer.txt", std::ios::binary)
          << format_verbalizer(m.verbalizer);
    }
    fs::create_directories(fs::path(run_dir) / "step2");
    write_soft_labels_csv(art.soft_labels,
                          (fs::path(run_dir) / "step2" / "soft_labels.csv").string());
    fs::create_directories(fs::path(run_dir) / "final");
    save_checkpoint((fs::path(run_dir) / "final" / "checkpoint").string(),
                    art.final_model, vocab);
    write_metrics_json(art.metrics, (fs::path(run_dir) / "metrics.json").string());
  }
  return art;
}

struct ScRunArtifacts {
  Encoder model;
  MetricsReport metrics;
};

inline ScRunArtifacts run_sc(const Encoder& base, const Vocabulary& vocab,
                             const std::vector<Sample>& train_samples,
                             const std::vector<Sample>& holdout,
                             const std::vector<std::string>& classes,
                             const TrainConfig& tcfg, const std::string& run_dir = "") {
  if (train_samples.empty()) throw Error(ErrorCode::EmptyCorpus, "no training samples");
  if (holdout.empty()) throw Error(ErrorCode::EmptyEvaluation, "empty holdout");
  namespace fs = std::filesystem;
  std::vector<std::string> texts;
  std::vector<std::size_t> labels;
  for (const auto& s : train_samples) {
    texts.push_back(s.rendered);
    labels.push_back(class_index(classes, s.main.label));
  }
  Encoder enc = attach_classifier_head(base, static_cast<int>(classes.size()));
  train_classifier_hard(enc, vocab, texts, labels, tcfg);
  MetricsReport metrics = evaluate_classifier(enc, vocab, holdout, classes);
  metrics.metadata.seed = static_cast<std::int64_t>(tcfg.seed);
  metrics.metadata.method = "sc";
  if (!run_dir.empty()) {
    fs::create_directories(fs::path(run_dir) / "final");
    nlohmann::json run{{"method", "sc"},
                       {"classes", classes},
                       {"train", tcfg.to_json()},
                       {"n_train", train_samples.size()}};
    std::ofstream(fs::path(run_dir) / "run.json", std::ios::binary)
        << run.dump(2) << "\n";
    save_checkpoint((fs::path(run_dir) / "final" / "checkpoint").string(), enc, vocab);
    write_metrics_json(metrics, (fs::path(run_dir) / "metrics.json").string());
  }
  ScRunArtifacts art{std::move(enc), std::move(metrics)};
  return art;
}

inline MetricsReport run_zero_shot(Encoder& base, const Vocabulary& vocab,
                                   const Verbalizer& verbalizer,
                                   const PatternTemplate& tmpl,
                                   const std::vector<Sample>& holdout) {
  if (holdout.empty()) throw Error(ErrorCode::EmptyEvaluation, "empty holdout");
  tmpl.validate();
  auto verb_ids = verbalizer.token_ids(vocab);
  std::vector<std::string> gold, pred;
  for (const auto& s : holdout) {
    auto prompt = apply_pattern(tmpl, s.rendered, vocab, base.config().max_len);
    auto logits = verbalizer_class_logits(base, prompt, verb_ids);
    std::size_t arg = 0;
    for (std::size_t c = 1; c < logits.size(); ++c) {
      if (logits[c] > logits[arg]) arg = c;
    }
    gold.push_back(s.main.label);
    pred.push_back(verbalizer.classes[arg]);
  }
  auto metrics = compute_metrics(gold, pred, verbalizer.classes);
  metrics.metadata.method = "zero-shot";
  return metrics;
}

}  // namespace clozepet
