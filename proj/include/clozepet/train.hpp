#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "clozepet/error.hpp"
#include "clozepet/model.hpp"
#include "clozepet/rng.hpp"
#include "clozepet/vocab.hpp"

#include "json.hpp"

namespace clozepet {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  int grad_accum_steps = 1;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double mask_rate = 0.15;
  std::uint64_t seed = 42;

  void validate() const {
    if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
    if (grad_accum_steps < 1) {
      throw Error(ErrorCode::InvalidConfig, "grad_accum_steps must be >= 1");
    }
    if (!(learning_rate > 0.0)) {
      throw Error(ErrorCode::InvalidConfig, "learning_rate must be positive");
    }
    if (weight_decay < 0.0) throw Error(ErrorCode::InvalidConfig, "weight_decay must be >= 0");
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "mask_rate must be in (0, 1)");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "betas must be in [0, 1)");
    }
  }

  // Samples accumulated into one optimizer step.
  std::size_t step_span() const {
    return static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(grad_accum_steps);
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"grad_accum_steps", grad_accum_steps},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"mask_rate", mask_rate},
            {"seed", seed}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_accum_steps = j.value("grad_accum_steps", c.grad_accum_steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.mask_rate = j.value("mask_rate", c.mask_rate);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

// Adam with bias correction and decoupled weight decay. Updated weights
// are snapped back to the float32 grid so every reachable model state
// serializes losslessly.
class Adam {
 public:
  Adam(std::vector<Tensor*>& params, const TrainConfig& cfg)
      : params_(params), cfg_(cfg) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  }

  void step(double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor* p = params_[i];
      for (std::size_t j = 0; j < p->size(); ++j) {
        double g = p->g[j] * grad_scale;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.adam_eps) +
                     cfg_.weight_decay * p->w[j];
        p->w[j] = round_f32(p->w[j] - cfg_.learning_rate * upd);
      }
    }
  }

 private:
  std::vector<Tensor*>& params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Masked-token corruption: each non-special position is picked with
// mask_prob; picked tokens become [MASK] 80% of the time, a random
// non-special token 10%, and stay unchanged 10%. Targets are the original
// ids at the picked positions.

struct MaskedSequence {
  TokenIds ids;
  std::vector<std::pair<std::size_t, int>> targets;  // (position, original id)
};

inline MaskedSequence apply_mlm_masking(const TokenIds& ids, const Vocabulary& vocab,
                                        double mask_prob, Rng& rng) {
  MaskedSequence out;
  out.ids = ids;
  for (std::size_t pos = 0; pos < ids.size(); ++pos) {
    if (vocab.is_special(ids[pos])) continue;
    if (!rng.bernoulli(mask_prob)) continue;
    out.targets.emplace_back(pos, ids[pos]);
    double r = rng.uniform();
    if (r < 0.8) {
      out.ids[pos] = vocab.mask_id;
    } else if (r < 0.9) {
      int pick;
      do {
        pick = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(vocab.size())));
      } while (vocab.is_special(pick));
      out.ids[pos] = pick;
    }  // else keep the original token
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss entry points. Each runs its own forward pass; the *_and_grad
// variants also backpropagate, accumulating into the parameter gradients.

inline double mlm_loss_value(Encoder& enc, const TokenIds& ids,
                             const std::vector<std::pair<std::size_t, int>>& targets) {
  if (targets.empty()) throw Error(ErrorCode::NoMaskPresent, "no masked positions");
  enc.forward(ids);
  double loss = 0.0;
  for (const auto& [pos, target] : targets) {
    auto lp = log_softmax(enc.mlm_logits(pos));
    loss -= lp[static_cast<std::size_t>(target)];
  }
  return loss / static_cast<double>(targets.size());
}

inline double mlm_loss_and_grad(Encoder& enc, const TokenIds& ids,
                                const std::vector<std::pair<std::size_t, int>>& targets) {
  if (targets.empty()) throw Error(ErrorCode::NoMaskPresent, "no masked positions");
  const auto& hidden = enc.forward(ids);
  std::vector<double> d_hidden(hidden.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(targets.size());
  double loss = 0.0;
  for (const auto& [pos, target] : targets) {
    auto logits = enc.mlm_logits(pos);
    auto p = softmax(logits);
    loss -= std::log(std::max(p[static_cast<std::size_t>(target)], 1e-300));
    std::vector<double> d(p.size());
    for (std::size_t v = 0; v < p.size(); ++v) d[v] = p[v] * inv;
    d[static_cast<std::size_t>(target)] -= inv;
    enc.mlm_backward(pos, d, d_hidden);
  }
  enc.backward(d_hidden);
  return loss * inv;
}

inline double classifier_loss_value(Encoder& enc, const TokenIds& ids,
                                    const std::vector<double>& target_dist) {
  enc.forward(ids);
  auto lp = log_softmax(enc.class_logits());
  if (lp.size() != target_dist.size()) {
    throw Error(ErrorCode::LengthMismatch, "target distribution size mismatch");
  }
  double loss = 0.0;
  for (std::size_t c = 0; c < lp.size(); ++c) loss -= target_dist[c] * lp[c];
  return loss;
}

inline double classifier_loss_and_grad(Encoder& enc, const TokenIds& ids,
                                       const std::vector<double>& target_dist) {
  const auto& hidden = enc.forward(ids);
  auto logits = enc.class_logits();
  if (logits.size() != target_dist.size()) {
    throw Error(ErrorCode::LengthMismatch, "target distribution size mismatch");
  }
  auto p = softmax(logits);
  double loss = 0.0;
  std::vector<double> d(p.size());
  double tsum = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    loss -= target_dist[c] * std::log(std::max(p[c], 1e-300));
    tsum += target_dist[c];
    d[c] = p[c];
  }
  // d logits of -sum t_c log p_c is p * sum(t) - t; with normalized
  // targets sum(t) is 1.
  for (std::size_t c = 0; c < p.size(); ++c) d[c] = d[c] * tsum - target_dist[c];
  std::vector<double> d_hidden(hidden.size(), 0.0);
  enc.class_backward(d, d_hidden);
  enc.backward(d_hidden);
  return loss;
}

// Cross-entropy over the verbalizer-restricted distribution at one mask
// position: softmax over just the verbalizer token logits.
inline double verbalizer_loss_value(Encoder& enc, const TokenIds& ids,
                                    std::size_t mask_pos,
                                    const std::vector<int>& verbalizer_ids,
                                    std::size_t gold_idx) {
  enc.forward(ids);
  auto full = enc.mlm_logits(mask_pos);
  std::vector<double> restricted(verbalizer_ids.size());
  for (std::size_t j = 0; j < verbalizer_ids.size(); ++j) {
    restricted[j] = full[static_cast<std::size_t>(verbalizer_ids[j])];
  }
  return -log_softmax(restricted)[gold_idx];
}

inline double verbalizer_loss_and_grad(Encoder& enc, const TokenIds& ids,
                                       std::size_t mask_pos,
                                       const std::vector<int>& verbalizer_ids,
                                       std::size_t gold_idx) {
  const auto& hidden = enc.forward(ids);
  auto full = enc.mlm_logits(mask_pos);
  std::vector<double> restricted(verbalizer_ids.size());
  for (std::size_t j = 0; j < verbalizer_ids.size(); ++j) {
    restricted[j] = full[static_cast<std::size_t>(verbalizer_ids[j])];
  }
  auto p = softmax(restricted);
  double loss = -std::log(std::max(p[gold_idx], 1e-300));
  std::vector<double> d_full(full.size(), 0.0);
  for (std::size_t j = 0; j < verbalizer_ids.size(); ++j) {
    d_full[static_cast<std::size_t>(verbalizer_ids[j])] =
        p[j] - (j == gold_idx ? 1.0 : 0.0);
  }
  std::vector<double> d_hidden(hidden.size(), 0.0);
  enc.mlm_backward(mask_pos, d_full, d_hidden);
  enc.backward(d_hidden);
  return loss;
}

// ---------------------------------------------------------------------------
// Training loops. Batches are gradient-accumulation groups; the batch
// loss is the mean of per-sample losses.

struct TrainStats {
  std::vector<double> epoch_losses;
  double final_loss() const { return epoch_losses.empty() ? 0.0 : epoch_losses.back(); }
};

namespace seeds {
constexpr std::uint64_t kShuffle = 101;
constexpr std::uint64_t kMask = 102;
constexpr std::uint64_t kEvalMask = 103;
constexpr std::uint64_t kInit = 104;
constexpr std::uint64_t kDropout = 105;
}  // namespace seeds

inline TrainStats train_mlm(Encoder& enc, const Vocabulary& vocab,
                            const std::vector<std::string>& texts,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (texts.empty()) throw Error(ErrorCode::EmptyCorpus, "no training texts");
  std::vector<TokenIds> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) {
    seqs.push_back(encode_with_specials(t, vocab, enc.config().max_len));
  }
  Adam opt(enc.parameters(), cfg);
  Rng drop_rng(derive_seed(cfg.seed, seeds::kDropout));
  enc.set_train_rng(&drop_rng);
  TrainStats stats;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, seeds::kShuffle, static_cast<std::uint64_t>(e)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.step_span()) {
      std::size_t stop = std::min(order.size(), start + cfg.step_span());
      enc.zero_grad();
      double batch_loss = 0.0;
      std::size_t counted = 0;
      for (std::size_t b = start; b < stop; ++b) {
        std::size_t idx = order[b];
        Rng mask_rng(derive_seed(cfg.seed, seeds::kMask, static_cast<std::uint64_t>(e), idx));
        auto masked = apply_mlm_masking(seqs[idx], vocab, cfg.mask_rate, mask_rng);
        if (masked.targets.empty()) continue;
        batch_loss += mlm_loss_and_grad(enc, masked.ids, masked.targets);
        ++counted;
      }
      if (counted == 0) continue;
      opt.step(1.0 / static_cast<double>(counted));
      epoch_loss += batch_loss;
      epoch_count += counted;
    }
    stats.epoch_losses.push_back(epoch_count ? epoch_loss / static_cast<double>(epoch_count) : 0.0);
  }
  enc.set_train_rng(nullptr);
  return stats;
}

// Mean masked-token cross-entropy with masking fixed by the seed alone,
// so two models see identical corruption on the same data.
inline double evaluate_mlm_loss(Encoder& enc, const Vocabulary& vocab,
                                const std::vector<std::string>& texts,
                                double mask_rate, std::uint64_t seed) {
  if (texts.empty()) throw Error(ErrorCode::EmptyCorpus, "no evaluation texts");
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto ids = encode_with_specials(texts[i], vocab, enc.config().max_len);
    Rng mask_rng(derive_seed(seed, seeds::kEvalMask, i));
    auto masked = apply_mlm_masking(ids, vocab, mask_rate, mask_rng);
    if (masked.targets.empty()) continue;
    total += mlm_loss_value(enc, masked.ids, masked.targets);
    ++counted;
  }
  if (counted == 0) throw Error(ErrorCode::NoMaskPresent, "masking selected no tokens");
  return total / static_cast<double>(counted);
}

inline TrainStats train_classifier_soft(Encoder& enc, const Vocabulary& vocab,
                                        const std::vector<std::string>& texts,
                                        const std::vector<std::vector<double>>& targets,
                                        const TrainConfig& cfg) {
  cfg.validate();
  if (texts.empty()) throw Error(ErrorCode::EmptyCorpus, "no training texts");
  if (texts.size() != targets.size()) {
    throw Error(ErrorCode::LengthMismatch, "texts and targets differ in length");
  }
  for (const auto& t : targets) {
    if (static_cast<int>(t.size()) != enc.config().n_classes) {
      throw Error(ErrorCode::MalformedTarget, "target size does not match class count");
    }
    double sum = 0.0;
    for (double v : t) {
      if (v < 0.0) throw Error(ErrorCode::MalformedTarget, "negative target probability");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-6) {
      throw Error(ErrorCode::MalformedTarget,
                  "target sums to " + std::to_string(sum) + ", expected 1");
    }
  }
  std::vector<TokenIds> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) {
    seqs.push_back(encode_with_specials(t, vocab, enc.config().max_len));
  }
  Adam opt(enc.parameters(), cfg);
  Rng drop_rng(derive_seed(cfg.seed, seeds::kDropout));
  enc.set_train_rng(&drop_rng);
  TrainStats stats;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, seeds::kShuffle, static_cast<std::uint64_t>(e)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.step_span()) {
      std::size_t stop = std::min(order.size(), start + cfg.step_span());
      enc.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t b = start; b < stop; ++b) {
        std::size_t idx = order[b];
        batch_loss += classifier_loss_and_grad(enc, seqs[idx], targets[idx]);
      }
      opt.step(1.0 / static_cast<double>(stop - start));
      epoch_loss += batch_loss;
    }
    stats.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  enc.set_train_rng(nullptr);
  return stats;
}

inline std::vector<double> one_hot(std::size_t n, std::size_t idx) {
  std::vector<double> v(n, 0.0);
  v.at(idx) = 1.0;
  return v;
}

// Supervised baseline trainer: hard labels as one-hot targets.
inline TrainStats train_classifier_hard(Encoder& enc, const Vocabulary& vocab,
                                        const std::vector<std::string>& texts,
                                        const std::vector<std::size_t>& labels,
                                        const TrainConfig& cfg) {
  if (texts.size() != labels.size()) {
    throw Error(ErrorCode::LengthMismatch, "texts and labels differ in length");
  }
  std::vector<std::vector<double>> targets;
  targets.reserve(labels.size());
  for (auto l : labels) {
    targets.push_back(one_hot(static_cast<std::size_t>(enc.config().n_classes), l));
  }
  return train_classifier_soft(enc, vocab, texts, targets, cfg);
}

// ---------------------------------------------------------------------------
// Inference helpers

inline std::vector<double> classify_probs(Encoder& enc, const Vocabulary& vocab,
                                          const std::string& text) {
  enc.forward(encode_with_specials(text, vocab, enc.config().max_len));
  return softmax(enc.class_logits());
}

inline std::vector<std::size_t> find_mask_positions(const TokenIds& ids,
                                                    const Vocabulary& vocab) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == vocab.mask_id) out.push_back(i);
  }
  return out;
}

// Log-probabilities over the vocabulary at every mask position.
inline std::vector<std::vector<double>> mask_log_probs(Encoder& enc,
                                                       const Vocabulary& vocab,
                                                       const TokenIds& ids) {
  auto positions = find_mask_positions(ids, vocab);
  if (positions.empty()) throw Error(ErrorCode::NoMaskPresent, "sequence has no mask token");
  enc.forward(ids);
  std::vector<std::vector<double>> out;
  out.reserve(positions.size());
  for (auto pos : positions) out.push_back(log_softmax(enc.mlm_logits(pos)));
  return out;
}

// Probability vectors over the vocabulary, one per mask position.
inline std::vector<std::vector<double>> predict_mask_distribution(Encoder& enc,
                                                                  const Vocabulary& vocab,
                                                                  const TokenIds& ids) {
  auto out = mask_log_probs(enc, vocab, ids);
  for (auto& row : out) {
    for (double& v : row) v = std::exp(v);
  }
  return out;
}

// Class distribution for a pre-encoded sequence.
inline std::vector<double> classify(Encoder& enc, const TokenIds& ids) {
  enc.forward(ids);
  return softmax(enc.class_logits());
}

}  // namespace clozepet
