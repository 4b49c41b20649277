#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clozepet/corpus.hpp"
#include "clozepet/csv.hpp"
#include "clozepet/error.hpp"
#include "clozepet/eval.hpp"
#include "clozepet/log.hpp"
#include "clozepet/model.hpp"
#include "clozepet/pet.hpp"
#include "clozepet/pretrain.hpp"
#include "clozepet/prompting.hpp"
#include "clozepet/train.hpp"

#include "json.hpp"

namespace clozepet {

struct ExperimentConfig {
  std::string train_corpus;
  std::string test_corpus;
  std::map<std::string, std::string> raw_corpora;  // pretrain corpus id -> path
  LabelSchema schema = LabelSchema::default_schema();
  ContextMode context_mode = ContextMode::NoContext;
  std::vector<int> shot_sizes{20, 50};
  int n_sets = 3;
  std::vector<std::uint64_t> seeds{1, 2};
  std::uint64_t bundle_seed = 42;
  std::vector<std::string> methods{"pet", "sc"};
  EncoderConfig model;
  PretrainPlan pretrain;
  PetConfig pet = [] {
    PetConfig p;
    p.templates = core_templates();
    return p;
  }();
  TrainConfig sc_train;
  std::string out_root = "runs";

  // Fills derived fields left empty: PET classes come from the schema.
  void normalize() {
    if (pet.classes.empty()) pet.classes = schema.classes;
  }

  void validate() const {
    if (train_corpus.empty() || test_corpus.empty()) {
      throw Error(ErrorCode::InvalidConfig, "train and test corpus paths are required");
    }
    schema.validate();
    if (seeds.empty()) throw Error(ErrorCode::InvalidConfig, "need at least one seed");
    if (n_sets < 1) throw Error(ErrorCode::InvalidConfig, "n_sets must be >= 1");
    if (shot_sizes.empty()) throw Error(ErrorCode::InvalidConfig, "need at least one shot size");
    for (int s : shot_sizes) {
      if (s < 0) throw Error(ErrorCode::InvalidConfig, "shot sizes must be >= 0");
    }
    if (methods.empty()) throw Error(ErrorCode::InvalidConfig, "need at least one method");
    for (const auto& m : methods) {
      if (m != "pet" && m != "sc") {
        throw Error(ErrorCode::InvalidConfig, "unknown grid method '" + m + "'");
      }
    }
    model.validate();
    pretrain.validate();
    pet.validate();
    sc_train.validate();
    if (out_root.empty()) throw Error(ErrorCode::InvalidConfig, "out_root is required");
  }

  nlohmann::json to_json() const {
    return {{"train_corpus", train_corpus},
            {"test_corpus", test_corpus},
            {"raw_corpora", raw_corpora},
            {"schema", schema.to_json()},
            {"context_mode", context_mode_name(context_mode)},
            {"shot_sizes", shot_sizes},
            {"n_sets", n_sets},
            {"seeds", seeds},
            {"bundle_seed", bundle_seed},
            {"methods", methods},
            {"model", model.to_json()},
            {"pretrain", pretrain.to_json()},
            {"pet", pet.to_json()},
            {"sc_train", sc_train.to_json()},
            {"out_root", out_root}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.train_corpus = j.value("train_corpus", std::string());
    c.test_corpus = j.value("test_corpus", std::string());
    if (j.contains("raw_corpora")) {
      c.raw_corpora = j.at("raw_corpora").get<std::map<std::string, std::string>>();
    }
    if (j.contains("schema")) c.schema = LabelSchema::from_json(j.at("schema"));
    if (j.contains("context_mode")) {
      c.context_mode = parse_context_mode(j.at("context_mode").get<std::string>());
    }
    if (j.contains("shot_sizes")) c.shot_sizes = j.at("shot_sizes").get<std::vector<int>>();
    c.n_sets = j.value("n_sets", c.n_sets);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.bundle_seed = j.value("bundle_seed", c.bundle_seed);
    if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<std::string>>();
    if (j.contains("model")) c.model = EncoderConfig::from_json(j.at("model"));
    if (j.contains("pretrain")) c.pretrain = PretrainPlan::from_json(j.at("pretrain"));
    if (j.contains("pet")) c.pet = PetConfig::from_json(j.at("pet"));
    if (j.contains("sc_train")) {
      c.sc_train = TrainConfig::from_json(j.at("sc_train"));
    } else {
      c.sc_train = c.pet.train;
    }
    c.out_root = j.value("out_root", c.out_root);
    c.normalize();
    return c;
  }
};

struct GridRow {
  std::string variant;
  std::string method;
  int shot_size = 0;
  int set_id = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct GridOutcome {
  std::vector<GridRow> rows;
  std::string results_path;
  int computed = 0;
  int skipped = 0;
};

inline std::string grid_cell_name(const GridRow& r) {
  std::string shots = r.shot_size == 0 ? "full" : std::to_string(r.shot_size) + "shots";
  return r.variant + "_" + r.method + "_" + shots + "_set" + std::to_string(r.set_id) +
         "_seed" + std::to_string(r.seed);
}

namespace detail {

inline const FewShotBundle& find_bundle(const FewShotTree& tree, int shots, int set_id) {
  for (const auto& b : tree.bundles) {
    if (b.shot_size == shots && b.set_id == set_id) return b;
  }
  throw Error(ErrorCode::InvalidConfig,
              "no bundle for " + std::to_string(shots) + " shots, set " +
                  std::to_string(set_id));
}

inline std::vector<std::string> paragraph_texts(const std::vector<Paragraph>& ps) {
  std::vector<std::string> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(p.text);
  return out;
}

}  // namespace detail

// Builds (or reloads) the pretrained base checkpoint for an experiment:
// vocabulary from the training split, fresh seeded init, then the
// configured pretraining plan. The "task" corpus id is always available
// and means the unlabeled training split itself.
inline LoadedModel prepare_base_model(const ExperimentConfig& cfg, Logger* log = nullptr) {
  namespace fs = std::filesystem;
  fs::path base_dir = fs::path(cfg.out_root) / "base";
  fs::path ckpt = base_dir / "checkpoint";
  if (fs::exists(ckpt)) {
    if (log) log->kv(1, {{"event", "base_reused"}, {"path", ckpt.string()}});
    return load_checkpoint(ckpt.string());
  }
  auto train_par = apply_schema(load_paragraphs_jsonl(cfg.train_corpus), cfg.schema);
  auto test_par = apply_schema(load_paragraphs_jsonl(cfg.test_corpus), cfg.schema);
  auto train_texts = detail::paragraph_texts(train_par);
  auto vocab = build_vocabulary(train_texts, static_cast<std::size_t>(cfg.model.vocab_size));
  EncoderConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  mc.n_classes = 0;
  Encoder base(mc);
  base.init();

  std::map<std::string, std::vector<std::string>> corpora;
  corpora["task"] = train_texts;
  for (const auto& [id, path] : cfg.raw_corpora) {
    corpora[id] = preprocess_raw(load_raw_corpus(path));
  }
  auto heldout = detail::paragraph_texts(test_par);
  fs::create_directories(base_dir);
  auto result = run_pretrain_plan(base, vocab, cfg.pretrain, corpora, heldout,
                                  (base_dir / "stages").string());
  if (log) {
    for (const auto& s : result.stages) {
      log->kv(1, {{"event", "pretrain_stage"},
                  {"corpus", s.corpus_id},
                  {"heldout_loss_before", Logger::num(s.heldout_loss_before)},
                  {"heldout_loss_after", Logger::num(s.heldout_loss_after)}});
    }
  }
  save_checkpoint(ckpt.string(), base, vocab);
  if (log) log->kv(1, {{"event", "base_saved"}, {"path", ckpt.string()}});
  return load_checkpoint(ckpt.string());
}

inline void write_results_csv(const std::vector<GridRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << csv::format_row({"model_variant", "method", "shot_size", "set", "seed", "accuracy"});
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.accuracy);
    out << csv::format_row({r.variant, r.method, std::to_string(r.shot_size),
                            std::to_string(r.set_id), std::to_string(r.seed), buf});
  }
}

// Full experiment matrix. Each cell owns one directory under
// out_root/cells; a cell with a metrics.json is treated as done and only
// re-read, which makes interrupted grids resumable. force wipes cells (and
// the base checkpoint) first.
inline GridOutcome run_grid(ExperimentConfig cfg, bool force = false, int jobs = 1,
                            Logger* log = nullptr) {
  namespace fs = std::filesystem;
  cfg.normalize();
  cfg.validate();
  fs::path root(cfg.out_root);
  if (force) {
    fs::remove_all(root / "cells");
    fs::remove_all(root / "base");
  }
  fs::create_directories(root);
  std::ofstream(root / "experiment.json", std::ios::binary) << cfg.to_json().dump(2) << "\n";

  auto base = prepare_base_model(cfg, log);

  auto train_par = apply_schema(load_paragraphs_jsonl(cfg.train_corpus), cfg.schema);
  auto test_par = apply_schema(load_paragraphs_jsonl(cfg.test_corpus), cfg.schema);
  auto train_samples = contextualize(train_par, cfg.context_mode);
  auto holdout = contextualize(test_par, cfg.context_mode);
  if (holdout.empty()) throw Error(ErrorCode::EmptyEvaluation, "test corpus is empty");

  std::vector<int> bundle_sizes;
  for (int s : cfg.shot_sizes) {
    if (s > 0) bundle_sizes.push_back(s);
  }
  FewShotTree tree;
  if (!bundle_sizes.empty()) {
    tree = build_fewshot_bundles(train_samples, bundle_sizes, cfg.n_sets, cfg.bundle_seed,
                                 cfg.schema.classes, holdout, (root / "bundles").string());
    if (log) {
      for (const auto& w : tree.warnings) log->kv(1, {{"event", "bundle_warning"}, {"detail", w}});
    }
  }

  GridOutcome outcome;
  for (const auto& method : cfg.methods) {
    for (int shots : cfg.shot_sizes) {
      if (shots == 0 && method == "pet") {
        if (log) log->kv(1, {{"event", "cell_skipped"}, {"reason", "pet needs a few-shot bundle"}});
        continue;
      }
      int first_set = shots == 0 ? 0 : 1;
      int last_set = shots == 0 ? 0 : cfg.n_sets;
      for (int set_id = first_set; set_id <= last_set; ++set_id) {
        for (auto seed : cfg.seeds) {
          GridRow row{cfg.pretrain.name, method, shots, set_id, seed, 0.0};
          fs::path cell_dir = root / "cells" / grid_cell_name(row);
          fs::path metrics_path = cell_dir / "metrics.json";
          if (fs::exists(metrics_path)) {
            row.accuracy = read_metrics_json(metrics_path.string()).accuracy;
            ++outcome.skipped;
          } else {
            MetricsReport rep = [&] {
              if (method == "pet") {
                PetConfig pc = cfg.pet;
                pc.classes = cfg.schema.classes;
                pc.train.seed = seed;
                const auto& bundle = detail::find_bundle(tree, shots, set_id);
                auto art = run_pet(base.encoder, base.vocab, bundle, holdout, pc,
                                   cell_dir.string(), jobs);
                return art.metrics;
              }
              TrainConfig tc = cfg.sc_train;
              tc.seed = seed;
              const auto& sc_train_samples =
                  shots == 0 ? train_samples : detail::find_bundle(tree, shots, set_id).labeled;
              auto art = run_sc(base.encoder, base.vocab, sc_train_samples, holdout,
                                cfg.schema.classes, tc, cell_dir.string());
              return art.metrics;
            }();
            rep.metadata.seed = static_cast<std::int64_t>(seed);
            rep.metadata.set_id = set_id;
            rep.metadata.shot_size = shots;
            rep.metadata.method = method;
            rep.metadata.variant = cfg.pretrain.name;
            rep.metadata.context = context_mode_name(cfg.context_mode);
            write_metrics_json(rep, metrics_path.string());
            row.accuracy = rep.accuracy;
            ++outcome.computed;
          }
          if (log) {
            log->kv(1, {{"event", "cell_done"},
                        {"cell", grid_cell_name(row)},
                        {"accuracy", Logger::num(row.accuracy)}});
          }
          outcome.rows.push_back(row);
        }
      }
    }
  }
  outcome.results_path = (root / "results.csv").string();
  write_results_csv(outcome.rows, outcome.results_path);
  return outcome;
}

}  // namespace clozepet
