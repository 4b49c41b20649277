#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "clozepet/error.hpp"
#include "clozepet/model.hpp"
#include "clozepet/train.hpp"

#include "json.hpp"

namespace clozepet {

inline constexpr const char* kBoundaryMarker = "###BEGINN";

struct PreprocessOptions {
  // A line counts as a lab-value table row when it carries at least
  // lab_min_digits digit characters and digits outnumber letters.
  bool drop_lab_tables = true;
  int lab_min_digits = 3;
};

namespace detail {

inline bool is_lab_table_line(const std::string& line, const PreprocessOptions& opt) {
  int digits = 0;
  int letters = 0;
  for (unsigned char c : line) {
    if (std::isdigit(c)) {
      ++digits;
    } else if (std::isalpha(c) || c >= 0x80) {
      ++letters;
    }
  }
  return digits >= opt.lab_min_digits && digits > letters;
}

inline bool ends_sentence(const std::string& word) {
  if (word.empty()) return false;
  char c = word.back();
  return c == '.' || c == '!' || c == '?';
}

}  // namespace detail

// Documents become a flat list of training texts: a boundary marker before
// each document, blank lines dropped, optional lab-table rows dropped, then
// a naive sentence split on terminal punctuation at word boundaries.
// Marker tokens already present in the input are kept as standalone texts,
// and two markers never end up adjacent.
inline std::vector<std::string> preprocess_raw(const std::vector<std::string>& letters,
                                               const PreprocessOptions& opt = {}) {
  std::vector<std::string> out;
  auto emit = [&out](const std::string& s) {
    if (s.empty()) return;
    if (s == kBoundaryMarker && !out.empty() && out.back() == kBoundaryMarker) return;
    out.push_back(s);
  };
  for (const auto& doc : letters) {
    emit(kBoundaryMarker);
    std::string current;
    auto flush = [&]() {
      std::string s;
      std::swap(s, current);
      emit(s);
    };
    std::istringstream lines(doc);
    std::string line;
    while (std::getline(lines, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      bool blank = line.find_first_not_of(" \t") == std::string::npos;
      if (blank) continue;
      if (opt.drop_lab_tables && detail::is_lab_table_line(line, opt)) continue;
      std::istringstream words(line);
      std::string word;
      while (words >> word) {
        if (word == kBoundaryMarker) {
          flush();
          emit(kBoundaryMarker);
          continue;
        }
        if (!current.empty()) current += ' ';
        current += word;
        if (detail::ends_sentence(word)) flush();
      }
    }
    flush();
  }
  return out;
}

// Raw corpus on disk: a single UTF-8 file is one document; a directory is
// one document per file, read in lexicographic name order.
inline std::vector<std::string> load_raw_corpus(const std::string& path) {
  namespace fs = std::filesystem;
  auto read_whole = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + p.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  };
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<std::string> docs;
    docs.reserve(files.size());
    for (const auto& f : files) docs.push_back(read_whole(f));
    return docs;
  }
  if (fs::exists(path)) return {read_whole(path)};
  throw Error(ErrorCode::MissingCorpus, "no corpus at " + path);
}

struct PretrainStage {
  std::string corpus_id;
  TrainConfig config;
};

struct PretrainPlan {
  std::string name = "public";
  std::vector<PretrainStage> stages;

  void validate() const {
    if (name.empty()) throw Error(ErrorCode::InvalidConfig, "plan needs a name");
    if (name != "public" && stages.empty()) {
      throw Error(ErrorCode::InvalidConfig, "plan '" + name + "' has no stages");
    }
    if (name == "public" && !stages.empty()) {
      throw Error(ErrorCode::InvalidConfig, "public plan must have no stages");
    }
    for (const auto& s : stages) {
      if (s.corpus_id.empty()) throw Error(ErrorCode::InvalidConfig, "stage without corpus id");
      s.config.validate();
    }
  }

  static PretrainPlan public_plan() { return {}; }

  static PretrainPlan task_plan(const TrainConfig& cfg) {
    return {"task", {{"task", cfg}}};
  }

  static PretrainPlan domain_plan(const TrainConfig& cfg) {
    return {"domain", {{"domain", cfg}}};
  }

  static PretrainPlan comb_plan(const TrainConfig& domain_cfg, const TrainConfig& task_cfg) {
    return {"comb", {{"domain", domain_cfg}, {"task", task_cfg}}};
  }

  nlohmann::json to_json() const {
    nlohmann::json stage_list = nlohmann::json::array();
    for (const auto& s : stages) {
      stage_list.push_back({{"corpus", s.corpus_id}, {"config", s.config.to_json()}});
    }
    return {{"name", name}, {"stages", stage_list}};
  }

  static PretrainPlan from_json(const nlohmann::json& j) {
    PretrainPlan p;
    p.name = j.value("name", std::string("public"));
    p.stages.clear();
    if (j.contains("stages")) {
      for (const auto& sj : j.at("stages")) {
        PretrainStage s;
        s.corpus_id = sj.at("corpus").get<std::string>();
        if (sj.contains("config")) s.config = TrainConfig::from_json(sj.at("config"));
        p.stages.push_back(std::move(s));
      }
    }
    p.validate();
    return p;
  }
};

struct StageResult {
  std::string corpus_id;
  double heldout_loss_before = 0.0;
  double heldout_loss_after = 0.0;
  std::string checkpoint_path;
  TrainStats stats;
};

struct PretrainResult {
  std::vector<StageResult> stages;
};

// Applies each stage's MLM training to the encoder in place. Stage
// checkpoints land under out_dir when given; held-out loss is measured
// before and after each stage with the stage's own mask seed so the
// corruption is identical on both sides.
inline PretrainResult run_pretrain_plan(
    Encoder& enc, const Vocabulary& vocab, const PretrainPlan& plan,
    const std::map<std::string, std::vector<std::string>>& corpora,
    const std::vector<std::string>& heldout = {}, const std::string& out_dir = "") {
  plan.validate();
  namespace fs = std::filesystem;
  PretrainResult result;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const auto& stage = plan.stages[i];
    auto it = corpora.find(stage.corpus_id);
    if (it == corpora.end()) {
      throw Error(ErrorCode::MissingCorpus, "plan stage needs corpus '" + stage.corpus_id + "'");
    }
    StageResult sr;
    sr.corpus_id = stage.corpus_id;
    if (!heldout.empty()) {
      sr.heldout_loss_before = evaluate_mlm_loss(enc, vocab, heldout, stage.config.mask_rate,
                                                 stage.config.seed);
    }
    sr.stats = train_mlm(enc, vocab, it->second, stage.config);
    if (!heldout.empty()) {
      sr.heldout_loss_after = evaluate_mlm_loss(enc, vocab, heldout, stage.config.mask_rate,
                                                stage.config.seed);
    }
    if (!out_dir.empty()) {
      fs::path dir = fs::path(out_dir) /
                     ("stage" + std::to_string(i + 1) + "_" + stage.corpus_id);
      fs::create_directories(dir);
      sr.checkpoint_path = (dir / "checkpoint").string();
      save_checkpoint(sr.checkpoint_path, enc, vocab);
    }
    result.stages.push_back(std::move(sr));
  }
  return result;
}

}  // namespace clozepet
