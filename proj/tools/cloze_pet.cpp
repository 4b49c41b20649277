#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "clozepet/corpus.hpp"
#include "clozepet/error.hpp"
#include "clozepet/eval.hpp"
#include "clozepet/experiment.hpp"
#include "clozepet/explain.hpp"
#include "clozepet/log.hpp"
#include "clozepet/model.hpp"
#include "clozepet/pet.hpp"
#include "clozepet/pretrain.hpp"
#include "clozepet/prompting.hpp"
#include "clozepet/synthbench.hpp"
#include "clozepet/train.hpp"

namespace fs = std::filesystem;
using namespace clozepet;

namespace {

Logger g_log;

int effective_jobs(int jobs) {
  if (const char* env = std::getenv("CLOZE_PET_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) jobs = std::min(jobs, cap);
  }
  return std::max(1, jobs);
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, "bad JSON in " + path + ": " + e.what());
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void refuse_or_remove(const fs::path& target, bool force) {
  if (!fs::exists(target)) return;
  if (!force) {
    throw Error(ErrorCode::IoError,
                target.string() + " already exists; pass --force to overwrite");
  }
  fs::remove_all(target);
}

std::vector<int> parse_shot_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  if (out.empty()) throw Error(ErrorCode::InvalidConfig, "empty shot list");
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Shared flag bag for the experiment-config subcommands; fields that stay
// at their sentinel are left to the config file.
struct ExpArgs {
  std::string config;
  std::string out;
  std::string context;
  std::string templates;
  std::string shots;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int set_id = 1;
  int jobs = 1;
  bool force = false;
};

ExperimentConfig load_experiment(const ExpArgs& a) {
  if (a.config.empty()) {
    throw Error(ErrorCode::InvalidConfig, "this subcommand needs --config");
  }
  auto cfg = ExperimentConfig::from_json(load_json_file(a.config));
  if (!a.out.empty()) cfg.out_root = a.out;
  if (!a.context.empty()) cfg.context_mode = parse_context_mode(a.context);
  if (!a.templates.empty()) cfg.pet.templates = template_group(a.templates);
  if (!a.shots.empty()) cfg.shot_sizes = parse_shot_list(a.shots);
  if (a.seed_given) cfg.seeds = {a.seed};
  cfg.normalize();
  return cfg;
}

struct CorpusViews {
  std::vector<Sample> train;
  std::vector<Sample> holdout;
};

CorpusViews load_corpus_views(const ExperimentConfig& cfg) {
  CorpusViews v;
  v.train = contextualize(apply_schema(load_paragraphs_jsonl(cfg.train_corpus), cfg.schema),
                          cfg.context_mode);
  v.holdout = contextualize(apply_schema(load_paragraphs_jsonl(cfg.test_corpus), cfg.schema),
                            cfg.context_mode);
  return v;
}

void print_metrics(const MetricsReport& rep) {
  std::cout << "accuracy=" << rep.accuracy << " macro_f1=" << rep.macro_f1
            << " n=" << rep.n_samples << "\n";
  for (std::size_t i = 0; i < rep.classes.size(); ++i) {
    const auto& m = rep.per_class[i];
    std::cout << "  " << rep.classes[i] << ": precision=" << m.precision
              << " recall=" << m.recall << " f1=" << m.f1 << " support=" << m.support
              << (m.excluded ? " (excluded)" : "") << "\n";
  }
}

// Label CSVs (sample_id,label) for eval / significance.
std::vector<std::pair<std::string, std::string>> load_label_csv(const std::string& path) {
  auto rows = csv::read_file(path);
  if (rows.empty()) throw Error(ErrorCode::IoError, "empty label file " + path);
  std::size_t start = 0;
  if (rows[0].size() >= 2 && rows[0][0] == "sample_id") start = 1;
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = start; i < rows.size(); ++i) {
    if (rows[i].size() < 2) {
      throw Error(ErrorCode::IoError, "label row needs sample_id,label in " + path);
    }
    out.emplace_back(rows[i][0], rows[i][1]);
  }
  return out;
}

// Aligns predictions with gold by sample id; order follows gold.
std::vector<std::string> align_to(const std::vector<std::pair<std::string, std::string>>& gold,
                                  const std::vector<std::pair<std::string, std::string>>& pred,
                                  const std::string& name) {
  std::map<std::string, std::string> by_id(pred.begin(), pred.end());
  std::vector<std::string> out;
  out.reserve(gold.size());
  for (const auto& [id, _] : gold) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw Error(ErrorCode::LengthMismatch, name + " is missing sample '" + id + "'");
    }
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommand bodies

int cmd_generate(const std::string& config, std::uint64_t seed, bool seed_given,
                 const std::string& out, bool force) {
  GeneratorSpec spec =
      config.empty() ? GeneratorSpec{} : GeneratorSpec::from_json(load_json_file(config));
  if (seed_given) spec.seed = seed;
  spec.validate();
  for (const char* f : {"train.jsonl", "test.jsonl", "spec.json"}) {
    refuse_or_remove(fs::path(out) / f, force);
  }
  auto corpus = generate(spec);
  write_generated(corpus, spec, out);
  g_log.kv(1, {{"event", "generated"},
               {"out", out},
               {"train_paragraphs", std::to_string(corpus.train.size())},
               {"test_paragraphs", std::to_string(corpus.test.size())},
               {"seed", std::to_string(spec.seed)}});
  std::cout << "wrote " << out << " (" << corpus.train.size() << " train / "
            << corpus.test.size() << " test paragraphs)\n";
  return 0;
}

int cmd_prepare(const std::string& train_path, const std::string& test_path,
                const std::string& schema_path, const std::string& context,
                const std::string& shots, int n_sets, std::uint64_t seed,
                const std::string& out, bool force) {
  LabelSchema schema = schema_path.empty() ? LabelSchema::default_schema()
                                           : LabelSchema::from_json(load_json_file(schema_path));
  ContextMode mode = context.empty() ? ContextMode::NoContext : parse_context_mode(context);
  auto sizes = parse_shot_list(shots.empty() ? "20,50" : shots);
  auto train = contextualize(apply_schema(load_paragraphs_jsonl(train_path), schema), mode);
  auto holdout = contextualize(apply_schema(load_paragraphs_jsonl(test_path), schema), mode);
  refuse_or_remove(out, force);
  auto tree = build_fewshot_bundles(train, sizes, n_sets, seed, schema.classes, holdout, out);
  for (const auto& w : tree.warnings) {
    g_log.kv(1, {{"event", "bundle_warning"}, {"detail", w}});
  }
  g_log.kv(1, {{"event", "prepared"},
               {"out", out},
               {"bundles", std::to_string(tree.bundles.size())},
               {"train_samples", std::to_string(train.size())},
               {"holdout_samples", std::to_string(holdout.size())}});
  std::cout << "wrote " << tree.bundles.size() << " bundles to " << out << "\n";
  return 0;
}

int cmd_pretrain(const ExpArgs& a) {
  auto cfg = load_experiment(a);
  if (a.force) fs::remove_all(fs::path(cfg.out_root) / "base");
  auto base = prepare_base_model(cfg, &g_log);
  std::cout << "base checkpoint: "
            << (fs::path(cfg.out_root) / "base" / "checkpoint").string()
            << " (vocab " << base.vocab.size() << ", params "
            << base.encoder.param_count() << ")\n";
  return 0;
}

int cmd_train_pet(const ExpArgs& a, int shots) {
  auto cfg = load_experiment(a);
  auto base = prepare_base_model(cfg, &g_log);
  auto views = load_corpus_views(cfg);
  if (a.set_id < 1 || a.set_id > cfg.n_sets) {
    throw Error(ErrorCode::InvalidConfig, "--set must be in 1.." + std::to_string(cfg.n_sets));
  }
  auto tree = build_fewshot_bundles(views.train, {shots}, cfg.n_sets, cfg.bundle_seed,
                                    cfg.schema.classes);
  PetConfig pc = cfg.pet;
  pc.classes = cfg.schema.classes;
  pc.train.seed = a.seed_given ? a.seed : cfg.seeds.front();
  GridRow row{cfg.pretrain.name, "pet", shots, a.set_id, pc.train.seed, 0.0};
  fs::path run_dir = fs::path(cfg.out_root) / "cells" / grid_cell_name(row);
  if (fs::exists(run_dir / "metrics.json") && !a.force) {
    throw Error(ErrorCode::IoError,
                run_dir.string() + " already has metrics; pass --force to redo");
  }
  if (a.force) fs::remove_all(run_dir);
  auto art = run_pet(base.encoder, base.vocab,
                     detail::find_bundle(tree, shots, a.set_id), views.holdout, pc,
                     run_dir.string(), effective_jobs(a.jobs));
  g_log.kv(1, {{"event", "pet_done"},
               {"run_dir", run_dir.string()},
               {"accuracy", Logger::num(art.metrics.accuracy)}});
  print_metrics(art.metrics);
  return 0;
}

int cmd_train_sc(const ExpArgs& a, int shots) {
  auto cfg = load_experiment(a);
  auto base = prepare_base_model(cfg, &g_log);
  auto views = load_corpus_views(cfg);
  TrainConfig tc = cfg.sc_train;
  tc.seed = a.seed_given ? a.seed : cfg.seeds.front();
  std::vector<Sample> train_samples;
  int set_for_name = 0;
  if (shots == 0) {
    train_samples = views.train;
  } else {
    if (a.set_id < 1 || a.set_id > cfg.n_sets) {
      throw Error(ErrorCode::InvalidConfig, "--set must be in 1.." + std::to_string(cfg.n_sets));
    }
    auto tree = build_fewshot_bundles(views.train, {shots}, cfg.n_sets, cfg.bundle_seed,
                                      cfg.schema.classes);
    train_samples = detail::find_bundle(tree, shots, a.set_id).labeled;
    set_for_name = a.set_id;
  }
  GridRow row{cfg.pretrain.name, "sc", shots, set_for_name, tc.seed, 0.0};
  fs::path run_dir = fs::path(cfg.out_root) / "cells" / grid_cell_name(row);
  if (fs::exists(run_dir / "metrics.json") && !a.force) {
    throw Error(ErrorCode::IoError,
                run_dir.string() + " already has metrics; pass --force to redo");
  }
  if (a.force) fs::remove_all(run_dir);
  auto art = run_sc(base.encoder, base.vocab, train_samples, views.holdout,
                    cfg.schema.classes, tc, run_dir.string());
  g_log.kv(1, {{"event", "sc_done"},
               {"run_dir", run_dir.string()},
               {"accuracy", Logger::num(art.metrics.accuracy)}});
  print_metrics(art.metrics);
  return 0;
}

int cmd_zero_shot(const ExpArgs& a, const std::string& verbalizer_path,
                  const std::string& template_name, const std::string& metrics_out) {
  auto cfg = load_experiment(a);
  auto base = prepare_base_model(cfg, &g_log);
  auto views = load_corpus_views(cfg);
  auto verb = parse_verbalizer(read_text_file(verbalizer_path));
  PatternTemplate tmpl = [&] {
    for (const auto& t : template_group("all")) {
      if (t.name == template_name) return t;
    }
    throw Error(ErrorCode::InvalidConfig, "unknown template '" + template_name + "'");
  }();
  auto rep = run_zero_shot(base.encoder, base.vocab, verb, tmpl, views.holdout);
  if (!metrics_out.empty()) write_metrics_json(rep, metrics_out);
  g_log.kv(1, {{"event", "zero_shot_done"}, {"accuracy", Logger::num(rep.accuracy)}});
  print_metrics(rep);
  return 0;
}

int cmd_eval(const std::string& gold_path, const std::string& pred_path,
             const std::string& classes_arg, const std::string& metrics_out) {
  auto gold_rows = load_label_csv(gold_path);
  auto pred = align_to(gold_rows, load_label_csv(pred_path), "predictions");
  std::vector<std::string> gold;
  for (const auto& [_, label] : gold_rows) gold.push_back(label);
  std::vector<std::string> classes = split_commas(classes_arg);
  if (classes.empty()) {
    for (const auto& g : gold) {
      if (std::find(classes.begin(), classes.end(), g) == classes.end()) classes.push_back(g);
    }
    for (const auto& p : pred) {
      if (std::find(classes.begin(), classes.end(), p) == classes.end()) classes.push_back(p);
    }
  }
  auto rep = compute_metrics(gold, pred, classes);
  if (!metrics_out.empty()) write_metrics_json(rep, metrics_out);
  print_metrics(rep);
  return 0;
}

int cmd_significance(const std::string& gold_path, const std::string& a_path,
                     const std::string& b_path, const std::string& metric, int rounds,
                     std::uint64_t seed) {
  auto gold_rows = load_label_csv(gold_path);
  auto a = align_to(gold_rows, load_label_csv(a_path), "pred-a");
  auto b = align_to(gold_rows, load_label_csv(b_path), "pred-b");
  std::vector<std::string> gold;
  for (const auto& [_, label] : gold_rows) gold.push_back(label);
  MetricSpec spec = MetricSpec::accuracy();
  if (metric.rfind("f1:", 0) == 0) {
    spec = MetricSpec::f1(metric.substr(3));
  } else if (metric != "accuracy") {
    throw Error(ErrorCode::InvalidConfig, "metric must be accuracy or f1:<class>");
  }
  std::vector<std::string> classes;
  auto note = [&classes](const std::string& label) {
    if (std::find(classes.begin(), classes.end(), label) == classes.end()) {
      classes.push_back(label);
    }
  };
  for (const auto& g : gold) note(g);
  for (const auto& v : a) note(v);
  for (const auto& v : b) note(v);
  double va = detail::metric_value(spec, gold, a, classes);
  double vb = detail::metric_value(spec, gold, b, classes);
  double p = approx_randomization_test(gold, a, b, spec, classes,
                                       static_cast<std::size_t>(rounds), seed);
  std::cout << "metric=" << metric << " a=" << va << " b=" << vb
            << " delta=" << std::fabs(va - vb) << " p_value=" << p
            << " significant=" << (p < 0.05 ? "yes" : "no") << "\n";
  return 0;
}

int cmd_explain(const std::string& run_dir, const std::string& checkpoint,
                const std::string& classes_arg, const std::string& text,
                const std::string& input_path, const std::string& target,
                bool sampled, int permutations, std::uint64_t seed,
                const std::string& format, const std::string& out_path) {
  std::string ckpt = checkpoint;
  std::vector<std::string> classes = split_commas(classes_arg);
  if (!run_dir.empty()) {
    if (ckpt.empty()) ckpt = (fs::path(run_dir) / "final" / "checkpoint").string();
    if (classes.empty()) {
      auto run = load_json_file((fs::path(run_dir) / "run.json").string());
      if (run.contains("pet")) {
        classes = run.at("pet").at("classes").get<std::vector<std::string>>();
      } else if (run.contains("classes")) {
        classes = run.at("classes").get<std::vector<std::string>>();
      }
    }
  }
  if (ckpt.empty()) {
    throw Error(ErrorCode::InvalidConfig, "need --checkpoint or --run");
  }
  if (classes.empty()) {
    throw Error(ErrorCode::InvalidConfig, "need --classes or a run directory with run.json");
  }
  auto lm = load_checkpoint(ckpt);
  if (lm.config.n_classes != static_cast<int>(classes.size())) {
    throw Error(ErrorCode::InvalidConfig,
                "checkpoint has " + std::to_string(lm.config.n_classes) +
                    " classes, got " + std::to_string(classes.size()) + " names");
  }
  std::vector<std::string> texts;
  if (!text.empty()) texts.push_back(text);
  if (!input_path.empty()) {
    std::istringstream in(read_text_file(input_path));
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) texts.push_back(line);
    }
  }
  if (texts.empty()) throw Error(ErrorCode::InvalidConfig, "need --text or --input");
  int target_idx = -1;
  if (!target.empty()) target_idx = static_cast<int>(class_index(classes, target));

  ExplainOptions opts;
  opts.sampled = sampled;
  opts.n_permutations = permutations;
  opts.seed = seed;

  std::ofstream file_out;
  std::ostream* sink = &std::cout;
  if (!out_path.empty()) {
    file_out.open(out_path, std::ios::binary);
    if (!file_out) throw Error(ErrorCode::IoError, "cannot write " + out_path);
    sink = &file_out;
  }
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto grouping = word_grouping(texts[i], lm.vocab, lm.config.max_len);
    auto rep = explain_classifier(lm.encoder, lm.vocab, texts[i], classes, grouping, opts,
                                  target_idx, "text_" + std::to_string(i));
    if (format == "jsonl") {
      (*sink) << report_to_json(rep).dump() << "\n";
    } else {
      (*sink) << render_report(rep, format) << "\n";
    }
  }
  return 0;
}

int cmd_grid(const ExpArgs& a) {
  auto cfg = load_experiment(a);
  auto outcome = run_grid(cfg, a.force, effective_jobs(a.jobs), &g_log);
  std::cout << "results: " << outcome.results_path << " (" << outcome.computed
            << " computed, " << outcome.skipped << " reused)\n";
  std::map<std::pair<std::string, int>, std::pair<double, int>> agg;
  for (const auto& r : outcome.rows) {
    auto& [sum, n] = agg[{r.method, r.shot_size}];
    sum += r.accuracy;
    ++n;
  }
  for (const auto& [key, val] : agg) {
    std::cout << "  " << key.first << " shots=" << key.second
              << " mean_accuracy=" << val.first / val.second << " runs=" << val.second
              << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cloze-prompt few-shot text classification toolkit"};
  app.require_subcommand(1);
  app.add_flag_function(
      "-v,--verbose",
      [](std::int64_t n) { g_log.set_verbosity(1 + static_cast<int>(n)); },
      "Increase log verbosity");

  int exit_code = 0;
  auto run = [&exit_code](auto fn) {
    return [fn, &exit_code]() { exit_code = fn(); };
  };

  // generate
  auto gen = std::make_shared<ExpArgs>();
  {
    auto* cmd = app.add_subcommand("generate", "Write a synthetic letter corpus");
    cmd->add_option("--config", gen->config, "GeneratorSpec JSON file");
    auto* seed_opt = cmd->add_option("--seed", gen->seed, "Generator seed");
    cmd->add_option("--out", gen->out, "Output directory")->required();
    cmd->add_flag("--force", gen->force, "Overwrite existing outputs");
    cmd->callback([gen, seed_opt, &exit_code]() {
      exit_code = cmd_generate(gen->config, gen->seed, seed_opt->count() > 0, gen->out,
                               gen->force);
    });
  }

  // prepare
  struct PrepareArgs {
    std::string train, test, schema, context, shots, out;
    int n_sets = 3;
    std::uint64_t seed = 42;
    bool force = false;
  };
  auto prep = std::make_shared<PrepareArgs>();
  {
    auto* cmd = app.add_subcommand(
        "prepare", "Apply the label schema and cut few-shot bundles from a corpus");
    cmd->add_option("--train", prep->train, "Training corpus JSONL")->required();
    cmd->add_option("--test", prep->test, "Holdout corpus JSONL")->required();
    cmd->add_option("--schema", prep->schema, "Label schema JSON (default: built-in)");
    cmd->add_option("--context", prep->context, "nocontext|prevcontext|context");
    cmd->add_option("--shots", prep->shots, "Shot sizes, e.g. 20,50");
    cmd->add_option("--sets", prep->n_sets, "Bundles per shot size");
    cmd->add_option("--seed", prep->seed, "Bundle sampling seed");
    cmd->add_option("--out", prep->out, "Output directory")->required();
    cmd->add_flag("--force", prep->force, "Overwrite existing outputs");
    cmd->callback(run([prep]() {
      return cmd_prepare(prep->train, prep->test, prep->schema, prep->context, prep->shots,
                         prep->n_sets, prep->seed, prep->out, prep->force);
    }));
  }

  auto add_exp_flags = [](CLI::App* cmd, std::shared_ptr<ExpArgs> a, bool with_set) {
    cmd->add_option("--config", a->config, "Experiment config JSON")->required();
    cmd->add_option("--out", a->out, "Override the config's output root");
    cmd->add_option("--context", a->context, "nocontext|prevcontext|context");
    cmd->add_option("--templates", a->templates, "core|null|all");
    cmd->add_option("--shots", a->shots, "Override shot sizes, e.g. 20,50");
    auto* seed_opt = cmd->add_option("--seed", a->seed, "Run seed");
    seed_opt->each([a](const std::string&) { a->seed_given = true; });
    if (with_set) cmd->add_option("--set", a->set_id, "Few-shot set id (1-based)");
    cmd->add_option("--jobs", a->jobs, "Worker threads");
    cmd->add_flag("--force", a->force, "Redo existing outputs");
  };

  // pretrain
  auto pre = std::make_shared<ExpArgs>();
  {
    auto* cmd = app.add_subcommand("pretrain", "Build the pretrained base checkpoint");
    add_exp_flags(cmd, pre, false);
    cmd->callback(run([pre]() { return cmd_pretrain(*pre); }));
  }

  // train-pet
  auto pet_args = std::make_shared<ExpArgs>();
  auto pet_shots = std::make_shared<int>(20);
  {
    auto* cmd = app.add_subcommand("train-pet", "Run the three-step pipeline on one bundle");
    add_exp_flags(cmd, pet_args, true);
    cmd->add_option("--bundle-shots", *pet_shots, "Labeled shots per class");
    cmd->callback(run([pet_args, pet_shots]() {
      if (!pet_args->shots.empty()) *pet_shots = parse_shot_list(pet_args->shots).front();
      return cmd_train_pet(*pet_args, *pet_shots);
    }));
  }

  // train-sc
  auto sc_args = std::make_shared<ExpArgs>();
  auto sc_shots = std::make_shared<int>(20);
  {
    auto* cmd = app.add_subcommand(
        "train-sc", "Train the supervised classifier baseline (0 shots = full data)");
    add_exp_flags(cmd, sc_args, true);
    cmd->add_option("--bundle-shots", *sc_shots, "Labeled shots per class, 0 for full");
    cmd->callback(run([sc_args, sc_shots]() {
      if (!sc_args->shots.empty()) *sc_shots = parse_shot_list(sc_args->shots).front();
      return cmd_train_sc(*sc_args, *sc_shots);
    }));
  }

  // zero-shot
  auto zs_args = std::make_shared<ExpArgs>();
  auto zs_verb = std::make_shared<std::string>();
  auto zs_tmpl = std::make_shared<std::string>("null");
  auto zs_out = std::make_shared<std::string>();
  {
    auto* cmd = app.add_subcommand("zero-shot", "Classify the holdout without training");
    add_exp_flags(cmd, zs_args, false);
    cmd->add_option("--verbalizer", *zs_verb, "Manual verbalizer file")->required();
    cmd->add_option("--template", *zs_tmpl, "Template name (default: null)");
    cmd->add_option("--metrics-out", *zs_out, "Write metrics JSON here");
    cmd->callback(run([zs_args, zs_verb, zs_tmpl, zs_out]() {
      return cmd_zero_shot(*zs_args, *zs_verb, *zs_tmpl, *zs_out);
    }));
  }

  // eval
  struct EvalArgs {
    std::string gold, pred, classes, out;
  };
  auto ev = std::make_shared<EvalArgs>();
  {
    auto* cmd = app.add_subcommand("eval", "Score a prediction file against gold labels");
    cmd->add_option("--gold", ev->gold, "Gold CSV (sample_id,label)")->required();
    cmd->add_option("--pred", ev->pred, "Prediction CSV (sample_id,label)")->required();
    cmd->add_option("--classes", ev->classes, "Comma-separated class order");
    cmd->add_option("--metrics-out", ev->out, "Write metrics JSON here");
    cmd->callback(
        run([ev]() { return cmd_eval(ev->gold, ev->pred, ev->classes, ev->out); }));
  }

  // significance
  struct SigArgs {
    std::string gold, a, b, metric = "accuracy";
    int rounds = 10000;
    std::uint64_t seed = 42;
  };
  auto sig = std::make_shared<SigArgs>();
  {
    auto* cmd = app.add_subcommand(
        "significance", "Approximate randomization test between two prediction files");
    cmd->add_option("--gold", sig->gold, "Gold CSV")->required();
    cmd->add_option("--pred-a", sig->a, "First prediction CSV")->required();
    cmd->add_option("--pred-b", sig->b, "Second prediction CSV")->required();
    cmd->add_option("--metric", sig->metric, "accuracy or f1:<class>");
    cmd->add_option("--rounds", sig->rounds, "Shuffle rounds");
    cmd->add_option("--seed", sig->seed, "Test seed");
    cmd->callback(run([sig]() {
      return cmd_significance(sig->gold, sig->a, sig->b, sig->metric, sig->rounds, sig->seed);
    }));
  }

  // explain
  struct ExplainArgs {
    std::string run, checkpoint, classes, text, input, target, format = "ansi", out;
    bool sampled = false;
    int permutations = 2000;
    std::uint64_t seed = 42;
  };
  auto ex = std::make_shared<ExplainArgs>();
  {
    auto* cmd = app.add_subcommand("explain", "Shapley attributions for a classifier");
    cmd->add_option("--run", ex->run, "Run directory with final/checkpoint and run.json");
    cmd->add_option("--checkpoint", ex->checkpoint, "Classifier checkpoint");
    cmd->add_option("--classes", ex->classes, "Comma-separated class names");
    cmd->add_option("--text", ex->text, "Single text to explain");
    cmd->add_option("--input", ex->input, "File with one text per line");
    cmd->add_option("--target", ex->target, "Class to attribute (default: predicted)");
    cmd->add_flag("--sampled", ex->sampled, "Permutation sampling instead of exact");
    cmd->add_option("--permutations", ex->permutations, "Sampled permutation count");
    cmd->add_option("--seed", ex->seed, "Sampling seed");
    cmd->add_option("--format", ex->format, "ansi|html|jsonl");
    cmd->add_option("--out", ex->out, "Write output here instead of stdout");
    cmd->callback(run([ex]() {
      return cmd_explain(ex->run, ex->checkpoint, ex->classes, ex->text, ex->input,
                         ex->target, ex->sampled, ex->permutations, ex->seed, ex->format,
                         ex->out);
    }));
  }

  // grid
  auto grid_args = std::make_shared<ExpArgs>();
  {
    auto* cmd = app.add_subcommand("grid", "Run the full experiment matrix");
    add_exp_flags(cmd, grid_args, false);
    cmd->callback(run([grid_args]() { return cmd_grid(*grid_args); }));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return exit_code;
}
