#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "clozepet/error.hpp"
#include "clozepet/rng.hpp"
#include "clozepet/vocab.hpp"

#include "json.hpp"

namespace clozepet {

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

// Arithmetic runs in double, but parameters are kept on the float32 grid
// (rounded after init and after every optimizer step) so checkpoints
// round-trip bit-exactly.
inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Tensor {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<double> w;
  std::vector<double> g;

  void resize(const std::string& n, std::size_t r, std::size_t c) {
    name = n;
    rows = r;
    cols = c;
    w.assign(r * c, 0.0);
    g.assign(r * c, 0.0);
  }
  std::size_t size() const { return w.size(); }
  double& at(std::size_t r, std::size_t c) { return w[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return w[r * cols + c]; }
};

struct EncoderConfig {
  int vocab_size = 0;
  int hidden = 64;
  int layers = 2;
  int heads = 2;
  int ffn = 256;
  int max_len = 128;
  int n_classes = 0;     // 0 disables the classifier head
  double dropout = 0.0;  // applied to attention and feed-forward outputs while training
  std::uint64_t seed = 42;

  void validate() const {
    if (vocab_size < 6) throw Error(ErrorCode::InvalidConfig, "vocab_size must be >= 6");
    if (hidden < 1 || layers < 1 || heads < 1 || ffn < 1) {
      throw Error(ErrorCode::InvalidConfig, "encoder dimensions must be positive");
    }
    if (max_len < 8) throw Error(ErrorCode::InvalidConfig, "max_len must be >= 8");
    if (hidden % heads != 0) {
      throw Error(ErrorCode::InvalidConfig, "hidden must be divisible by heads");
    }
    if (n_classes < 0) throw Error(ErrorCode::InvalidConfig, "n_classes must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "dropout must be in [0, 1)");
    }
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"hidden", hidden},       {"layers", layers},
            {"heads", heads},           {"ffn", ffn},             {"max_len", max_len},
            {"n_classes", n_classes},   {"dropout", dropout},     {"seed", seed}};
  }
  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.dropout = j.value("dropout", 0.0);
    c.seed = j.value("seed", std::uint64_t{42});
    c.validate();
    return c;
  }
};

namespace detail {

constexpr double kLnEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) +
         x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

}  // namespace detail

// Bidirectional pre-norm transformer encoder. Sequences are processed one
// at a time at their true length, so no attention masking is needed.
// forward() caches activations; backward() must follow the matching
// forward on the same instance.
class Encoder {
 public:
  explicit Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    const auto F = static_cast<std::size_t>(cfg_.ffn);
    const auto L = static_cast<std::size_t>(cfg_.max_len);
    tok_emb.resize("tok_emb", V, H);
    pos_emb.resize("pos_emb", L, H);
    layers_.resize(static_cast<std::size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
      auto& ly = layers_[static_cast<std::size_t>(l)];
      std::string p = "layer" + std::to_string(l) + ".";
      ly.ln1_g.resize(p + "ln1_g", H, 1);
      ly.ln1_b.resize(p + "ln1_b", H, 1);
      ly.wq.resize(p + "wq", H, H);
      ly.bq.resize(p + "bq", H, 1);
      ly.wk.resize(p + "wk", H, H);
      ly.bk.resize(p + "bk", H, 1);
      ly.wv.resize(p + "wv", H, H);
      ly.bv.resize(p + "bv", H, 1);
      ly.wo.resize(p + "wo", H, H);
      ly.bo.resize(p + "bo", H, 1);
      ly.ln2_g.resize(p + "ln2_g", H, 1);
      ly.ln2_b.resize(p + "ln2_b", H, 1);
      ly.w1.resize(p + "w1", F, H);
      ly.b1.resize(p + "b1", F, 1);
      ly.w2.resize(p + "w2", H, F);
      ly.b2.resize(p + "b2", H, 1);
    }
    lnf_g.resize("lnf_g", H, 1);
    lnf_b.resize("lnf_b", H, 1);
    mlm_w.resize("mlm_w", V, H);
    mlm_b.resize("mlm_b", V, 1);
    if (cfg_.n_classes > 0) {
      cls_w.resize("cls_w", static_cast<std::size_t>(cfg_.n_classes), H);
      cls_b.resize("cls_b", static_cast<std::size_t>(cfg_.n_classes), 1);
    }
    collect_params();
  }

  // params_ holds pointers into this object, so copies and moves must
  // re-collect them.
  Encoder(const Encoder& o)
      : tok_emb(o.tok_emb), pos_emb(o.pos_emb), lnf_g(o.lnf_g), lnf_b(o.lnf_b),
        mlm_w(o.mlm_w), mlm_b(o.mlm_b), cls_w(o.cls_w), cls_b(o.cls_b),
        cfg_(o.cfg_), layers_(o.layers_), ids_(o.ids_), act_(o.act_) {
    collect_params();
  }
  Encoder(Encoder&& o) noexcept
      : tok_emb(std::move(o.tok_emb)), pos_emb(std::move(o.pos_emb)),
        lnf_g(std::move(o.lnf_g)), lnf_b(std::move(o.lnf_b)),
        mlm_w(std::move(o.mlm_w)), mlm_b(std::move(o.mlm_b)),
        cls_w(std::move(o.cls_w)), cls_b(std::move(o.cls_b)), cfg_(o.cfg_),
        layers_(std::move(o.layers_)), ids_(std::move(o.ids_)),
        act_(std::move(o.act_)) {
    collect_params();
  }
  Encoder& operator=(const Encoder& o) {
    if (this != &o) {
      Encoder tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  Encoder& operator=(Encoder&& o) noexcept {
    tok_emb = std::move(o.tok_emb);
    pos_emb = std::move(o.pos_emb);
    lnf_g = std::move(o.lnf_g);
    lnf_b = std::move(o.lnf_b);
    mlm_w = std::move(o.mlm_w);
    mlm_b = std::move(o.mlm_b);
    cls_w = std::move(o.cls_w);
    cls_b = std::move(o.cls_b);
    cfg_ = o.cfg_;
    layers_ = std::move(o.layers_);
    ids_ = std::move(o.ids_);
    act_ = std::move(o.act_);
    train_rng_ = nullptr;
    collect_params();
    return *this;
  }

  const EncoderConfig& config() const { return cfg_; }

  // While set, forward passes apply dropout using this stream.
  void set_train_rng(Rng* rng) { train_rng_ = rng; }

  void init() {
    Rng rng(cfg_.seed);
    init(rng);
  }

  void init(Rng& rng) {
    for (Tensor* t : params_) {
      bool is_gain = t->name.find("ln1_g") != std::string::npos ||
                     t->name.find("ln2_g") != std::string::npos ||
                     t->name == "lnf_g";
      bool is_bias = t->cols == 1 && !is_gain;
      for (double& v : t->w) {
        if (is_gain) {
          v = 1.0;
        } else if (is_bias) {
          v = 0.0;
        } else {
          v = round_f32(rng.normal(0.0, 0.02));
        }
      }
    }
  }

  std::vector<Tensor*>& parameters() { return params_; }
  const std::vector<Tensor*>& parameters() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Tensor* t : params_) n += t->size();
    return n;
  }

  void zero_grad() {
    for (Tensor* t : params_) std::fill(t->g.begin(), t->g.end(), 0.0);
  }

  // Final hidden states, flat row-major [T*H].
  const std::vector<double>& forward(const TokenIds& ids) {
    const auto T = ids.size();
    if (T == 0) throw Error(ErrorCode::InvalidConfig, "empty token sequence");
    if (T > static_cast<std::size_t>(cfg_.max_len)) {
      throw Error(ErrorCode::SequenceTooLong,
                  std::to_string(T) + " tokens exceed max_len " +
                      std::to_string(cfg_.max_len));
    }
    for (int id : ids) {
      if (id < 0 || id >= cfg_.vocab_size) {
        throw Error(ErrorCode::InvalidConfig, "token id out of range");
      }
    }
    ids_ = ids;
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    act_.x.assign(layers_.size() + 1, {});
    act_.x[0].resize(T * H);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        act_.x[0][t * H + h] = tok_emb.at(static_cast<std::size_t>(ids[t]), h) +
                               pos_emb.at(t, h);
      }
    }
    act_.layer.assign(layers_.size(), {});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      layer_forward(l, T);
    }
    layer_norm_forward(act_.x[layers_.size()], lnf_g, lnf_b, T, act_.final_xhat,
                       act_.final_sigma, act_.hidden);
    return act_.hidden;
  }

  std::size_t seq_len() const { return ids_.size(); }

  // Vocab logits at one position of the last forward pass.
  std::vector<double> mlm_logits(std::size_t pos) const {
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    std::vector<double> out(static_cast<std::size_t>(cfg_.vocab_size));
    for (std::size_t v = 0; v < out.size(); ++v) {
      double acc = mlm_b.w[v];
      for (std::size_t h = 0; h < H; ++h) acc += mlm_w.at(v, h) * act_.hidden[pos * H + h];
      out[v] = acc;
    }
    return out;
  }

  // Accumulates head gradients and the matching d_hidden contribution.
  void mlm_backward(std::size_t pos, const std::vector<double>& d_logits,
                    std::vector<double>& d_hidden) {
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    for (std::size_t v = 0; v < d_logits.size(); ++v) {
      double dl = d_logits[v];
      if (dl == 0.0) continue;
      mlm_b.g[v] += dl;
      for (std::size_t h = 0; h < H; ++h) {
        mlm_w.g[v * H + h] += dl * act_.hidden[pos * H + h];
        d_hidden[pos * H + h] += dl * mlm_w.w[v * H + h];
      }
    }
  }

  // Class logits from the first position (the [CLS] slot).
  std::vector<double> class_logits() const {
    if (cfg_.n_classes == 0) throw Error(ErrorCode::HeadMissing, "no classifier head");
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    std::vector<double> out(static_cast<std::size_t>(cfg_.n_classes));
    for (std::size_t c = 0; c < out.size(); ++c) {
      double acc = cls_b.w[c];
      for (std::size_t h = 0; h < H; ++h) acc += cls_w.at(c, h) * act_.hidden[h];
      out[c] = acc;
    }
    return out;
  }

  void class_backward(const std::vector<double>& d_logits, std::vector<double>& d_hidden) {
    if (cfg_.n_classes == 0) throw Error(ErrorCode::HeadMissing, "no classifier head");
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    for (std::size_t c = 0; c < d_logits.size(); ++c) {
      double dl = d_logits[c];
      cls_b.g[c] += dl;
      for (std::size_t h = 0; h < H; ++h) {
        cls_w.g[c * H + h] += dl * act_.hidden[h];
        d_hidden[h] += dl * cls_w.w[c * H + h];
      }
    }
  }

  // Backpropagates d_hidden (w.r.t. the final hidden states) through the
  // stack, accumulating parameter gradients.
  void backward(const std::vector<double>& d_hidden) {
    const auto T = ids_.size();
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    std::vector<double> dx(T * H, 0.0);
    layer_norm_backward(d_hidden, act_.x[layers_.size()], act_.final_xhat,
                        act_.final_sigma, lnf_g, lnf_b, T, dx);
    for (std::size_t l = layers_.size(); l-- > 0;) {
      layer_backward(l, T, dx);
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        tok_emb.g[static_cast<std::size_t>(ids_[t]) * H + h] += dx[t * H + h];
        pos_emb.g[t * H + h] += dx[t * H + h];
      }
    }
  }

  Tensor tok_emb, pos_emb;
  Tensor lnf_g, lnf_b;
  Tensor mlm_w, mlm_b;
  Tensor cls_w, cls_b;

 private:
  struct Layer {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
  };

  struct LayerActs {
    std::vector<double> xhat1, sigma1, n1;  // first layer norm
    std::vector<double> q, k, v;
    std::vector<double> probs;  // heads * T * T
    std::vector<double> ctx;
    std::vector<double> res1;               // after the attention residual
    std::vector<double> xhat2, sigma2, n2;  // second layer norm
    std::vector<double> z1, a1;             // feed-forward
    std::vector<double> attn_keep, ffn_keep;  // dropout factors, empty when off
  };

  struct Acts {
    std::vector<std::vector<double>> x;  // residual stream per layer boundary
    std::vector<LayerActs> layer;
    std::vector<double> final_xhat, final_sigma;
    std::vector<double> hidden;
  };

  void collect_params() {
    params_.clear();
    params_.push_back(&tok_emb);
    params_.push_back(&pos_emb);
    for (auto& ly : layers_) {
      for (Tensor* t : {&ly.ln1_g, &ly.ln1_b, &ly.wq, &ly.bq, &ly.wk, &ly.bk,
                        &ly.wv, &ly.bv, &ly.wo, &ly.bo, &ly.ln2_g, &ly.ln2_b,
                        &ly.w1, &ly.b1, &ly.w2, &ly.b2}) {
        params_.push_back(t);
      }
    }
    params_.push_back(&lnf_g);
    params_.push_back(&lnf_b);
    params_.push_back(&mlm_w);
    params_.push_back(&mlm_b);
    if (cfg_.n_classes > 0) {
      params_.push_back(&cls_w);
      params_.push_back(&cls_b);
    }
  }

  // y = g * (x - mu) / sigma + b, per position over the hidden axis.
  void layer_norm_forward(const std::vector<double>& x, const Tensor& g,
                          const Tensor& b, std::size_t T,
                          std::vector<double>& xhat, std::vector<double>& sigma,
                          std::vector<double>& y) const {
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    xhat.resize(T * H);
    sigma.resize(T);
    y.resize(T * H);
    for (std::size_t t = 0; t < T; ++t) {
      double mu = 0.0;
      for (std::size_t h = 0; h < H; ++h) mu += x[t * H + h];
      mu /= static_cast<double>(H);
      double var = 0.0;
      for (std::size_t h = 0; h < H; ++h) {
        double d = x[t * H + h] - mu;
        var += d * d;
      }
      var /= static_cast<double>(H);
      double sd = std::sqrt(var + detail::kLnEps);
      sigma[t] = sd;
      for (std::size_t h = 0; h < H; ++h) {
        double xh = (x[t * H + h] - mu) / sd;
        xhat[t * H + h] = xh;
        y[t * H + h] = g.w[h] * xh + b.w[h];
      }
    }
  }

  void layer_norm_backward(const std::vector<double>& dy,
                           const std::vector<double>& /*x*/,
                           const std::vector<double>& xhat,
                           const std::vector<double>& sigma, Tensor& g, Tensor& b,
                           std::size_t T, std::vector<double>& dx) const {
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    const double invH = 1.0 / static_cast<double>(H);
    for (std::size_t t = 0; t < T; ++t) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t h = 0; h < H; ++h) {
        double d = dy[t * H + h];
        g.g[h] += d * xhat[t * H + h];
        b.g[h] += d;
        double dxh = d * g.w[h];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[t * H + h];
      }
      mean_dxhat *= invH;
      mean_dxhat_xhat *= invH;
      for (std::size_t h = 0; h < H; ++h) {
        double dxh = dy[t * H + h] * g.w[h];
        dx[t * H + h] += (dxh - mean_dxhat - xhat[t * H + h] * mean_dxhat_xhat) / sigma[t];
      }
    }
  }

  // y[t] = W x[t] + b with W stored [out, in].
  static void linear_forward(const std::vector<double>& x, const Tensor& w,
                             const Tensor& b, std::size_t T, std::vector<double>& y) {
    const std::size_t out = w.rows, in = w.cols;
    y.assign(T * out, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b.w[o];
        const double* wr = &w.w[o * in];
        const double* xr = &x[t * in];
        for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
        y[t * out + o] = acc;
      }
    }
  }

  static void linear_backward(const std::vector<double>& x, Tensor& w, Tensor& b,
                              std::size_t T, const std::vector<double>& dy,
                              std::vector<double>& dx) {
    const std::size_t out = w.rows, in = w.cols;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t o = 0; o < out; ++o) {
        double d = dy[t * out + o];
        if (d == 0.0) continue;
        b.g[o] += d;
        double* wg = &w.g[o * in];
        const double* wr = &w.w[o * in];
        const double* xr = &x[t * in];
        double* dxr = &dx[t * in];
        for (std::size_t i = 0; i < in; ++i) {
          wg[i] += d * xr[i];
          dxr[i] += d * wr[i];
        }
      }
    }
  }

  void layer_forward(std::size_t l, std::size_t T) {
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    const auto nh = static_cast<std::size_t>(cfg_.heads);
    const std::size_t dh = H / nh;
    auto& ly = layers_[l];
    auto& a = act_.layer[l];
    const auto& x = act_.x[l];

    layer_norm_forward(x, ly.ln1_g, ly.ln1_b, T, a.xhat1, a.sigma1, a.n1);
    linear_forward(a.n1, ly.wq, ly.bq, T, a.q);
    linear_forward(a.n1, ly.wk, ly.bk, T, a.k);
    linear_forward(a.n1, ly.wv, ly.bv, T, a.v);

    a.probs.assign(nh * T * T, 0.0);
    a.ctx.assign(T * H, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> scores(T);
    for (std::size_t head = 0; head < nh; ++head) {
      const std::size_t off = head * dh;
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t u = 0; u < T; ++u) {
          double acc = 0.0;
          for (std::size_t d = 0; d < dh; ++d) {
            acc += a.q[t * H + off + d] * a.k[u * H + off + d];
          }
          scores[u] = acc * scale;
        }
        auto p = softmax(scores);
        for (std::size_t u = 0; u < T; ++u) {
          a.probs[(head * T + t) * T + u] = p[u];
          for (std::size_t d = 0; d < dh; ++d) {
            a.ctx[t * H + off + d] += p[u] * a.v[u * H + off + d];
          }
        }
      }
    }
    std::vector<double> attn_out;
    linear_forward(a.ctx, ly.wo, ly.bo, T, attn_out);
    a.attn_keep = make_dropout(T * H);
    if (!a.attn_keep.empty()) {
      for (std::size_t i = 0; i < T * H; ++i) attn_out[i] *= a.attn_keep[i];
    }
    std::vector<double> res1(T * H);
    for (std::size_t i = 0; i < T * H; ++i) res1[i] = x[i] + attn_out[i];

    layer_norm_forward(res1, ly.ln2_g, ly.ln2_b, T, a.xhat2, a.sigma2, a.n2);
    linear_forward(a.n2, ly.w1, ly.b1, T, a.z1);
    a.a1.resize(a.z1.size());
    for (std::size_t i = 0; i < a.z1.size(); ++i) a.a1[i] = detail::gelu(a.z1[i]);
    std::vector<double> ffn_out;
    linear_forward(a.a1, ly.w2, ly.b2, T, ffn_out);
    a.ffn_keep = make_dropout(T * H);
    if (!a.ffn_keep.empty()) {
      for (std::size_t i = 0; i < T * H; ++i) ffn_out[i] *= a.ffn_keep[i];
    }

    act_.x[l + 1].resize(T * H);
    for (std::size_t i = 0; i < T * H; ++i) act_.x[l + 1][i] = res1[i] + ffn_out[i];
    a.res1 = std::move(res1);
  }

  void layer_backward(std::size_t l, std::size_t T, std::vector<double>& dx) {
    const auto H = static_cast<std::size_t>(cfg_.hidden);
    const auto nh = static_cast<std::size_t>(cfg_.heads);
    const std::size_t dh = H / nh;
    const auto F = static_cast<std::size_t>(cfg_.ffn);
    auto& ly = layers_[l];
    auto& a = act_.layer[l];
    const auto& x = act_.x[l];

    // dx arrives as d(res2) = d(res1 + ffn_out)
    std::vector<double> d_ffn_out = dx;  // also feeds residual below
    if (!a.ffn_keep.empty()) {
      for (std::size_t i = 0; i < T * H; ++i) d_ffn_out[i] *= a.ffn_keep[i];
    }
    std::vector<double> d_a1(T * F, 0.0);
    linear_backward(a.a1, ly.w2, ly.b2, T, d_ffn_out, d_a1);
    std::vector<double> d_z1(T * F);
    for (std::size_t i = 0; i < T * F; ++i) {
      d_z1[i] = d_a1[i] * detail::gelu_grad(a.z1[i]);
    }
    std::vector<double> d_n2(T * H, 0.0);
    linear_backward(a.n2, ly.w1, ly.b1, T, d_z1, d_n2);
    std::vector<double> d_res1 = dx;  // residual branch
    layer_norm_backward(d_n2, a.res1, a.xhat2, a.sigma2, ly.ln2_g, ly.ln2_b, T,
                        d_res1);

    std::vector<double> d_attn_out = d_res1;
    if (!a.attn_keep.empty()) {
      for (std::size_t i = 0; i < T * H; ++i) d_attn_out[i] *= a.attn_keep[i];
    }
    std::vector<double> d_ctx(T * H, 0.0);
    linear_backward(a.ctx, ly.wo, ly.bo, T, d_attn_out, d_ctx);

    std::vector<double> d_q(T * H, 0.0), d_k(T * H, 0.0), d_v(T * H, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dp(T), ds(T);
    for (std::size_t head = 0; head < nh; ++head) {
      const std::size_t off = head * dh;
      for (std::size_t t = 0; t < T; ++t) {
        const double* p = &a.probs[(head * T + t) * T];
        for (std::size_t u = 0; u < T; ++u) {
          double acc = 0.0;
          for (std::size_t d = 0; d < dh; ++d) {
            acc += d_ctx[t * H + off + d] * a.v[u * H + off + d];
            d_v[u * H + off + d] += p[u] * d_ctx[t * H + off + d];
          }
          dp[u] = acc;
        }
        double dot = 0.0;
        for (std::size_t u = 0; u < T; ++u) dot += dp[u] * p[u];
        for (std::size_t u = 0; u < T; ++u) ds[u] = (dp[u] - dot) * p[u] * scale;
        for (std::size_t u = 0; u < T; ++u) {
          for (std::size_t d = 0; d < dh; ++d) {
            d_q[t * H + off + d] += ds[u] * a.k[u * H + off + d];
            d_k[u * H + off + d] += ds[u] * a.q[t * H + off + d];
          }
        }
      }
    }
    std::vector<double> d_n1(T * H, 0.0);
    linear_backward(a.n1, ly.wq, ly.bq, T, d_q, d_n1);
    linear_backward(a.n1, ly.wk, ly.bk, T, d_k, d_n1);
    linear_backward(a.n1, ly.wv, ly.bv, T, d_v, d_n1);

    std::vector<double> d_x(T * H, 0.0);
    layer_norm_backward(d_n1, x, a.xhat1, a.sigma1, ly.ln1_g, ly.ln1_b, T, d_x);
    for (std::size_t i = 0; i < T * H; ++i) dx[i] = d_res1[i] + d_x[i];
  }

  // Inverted-dropout keep factors, or empty when dropout is inactive.
  std::vector<double> make_dropout(std::size_t n) {
    if (train_rng_ == nullptr || cfg_.dropout <= 0.0) return {};
    std::vector<double> keep(n);
    const double inv = 1.0 / (1.0 - cfg_.dropout);
    for (double& k : keep) k = train_rng_->bernoulli(cfg_.dropout) ? 0.0 : inv;
    return keep;
  }

  EncoderConfig cfg_;
  std::vector<Layer> layers_;
  std::vector<Tensor*> params_;
  TokenIds ids_;
  Acts act_;
  Rng* train_rng_ = nullptr;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, config JSON, vocab, named float32 arrays.

namespace detail {

constexpr char kCkptMagic[8] = {'C', 'L', 'Z', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline void put_str(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw Error(ErrorCode::BadCheckpoint, "truncated checkpoint");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw Error(ErrorCode::BadCheckpoint, "truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& in) {
  std::uint32_t bits = get_u32(in);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::string get_str(std::istream& in) {
  std::uint64_t n = get_u64(in);
  if (n > (1ull << 32)) throw Error(ErrorCode::BadCheckpoint, "absurd string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw Error(ErrorCode::BadCheckpoint, "truncated checkpoint");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Encoder& enc,
                            const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out.write(detail::kCkptMagic, 8);
  detail::put_u32(out, detail::kCkptVersion);
  detail::put_str(out, enc.config().to_json().dump());
  detail::put_u64(out, vocab.tokens.size());
  for (const auto& t : vocab.tokens) detail::put_str(out, t);
  const auto& params = enc.parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Tensor* t : params) {
    detail::put_str(out, t->name);
    detail::put_u64(out, t->size());
    for (double v : t->w) detail::put_f32(out, static_cast<float>(v));
  }
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path);
}

struct LoadedModel {
  EncoderConfig config;
  Vocabulary vocab;
  Encoder encoder;
};

inline LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
    throw Error(ErrorCode::BadCheckpoint, path + ": bad magic");
  }
  std::uint32_t version = detail::get_u32(in);
  if (version != detail::kCkptVersion) {
    throw Error(ErrorCode::BadCheckpoint,
                path + ": unsupported version " + std::to_string(version));
  }
  EncoderConfig cfg = EncoderConfig::from_json(nlohmann::json::parse(detail::get_str(in)));
  std::uint64_t n_tokens = detail::get_u64(in);
  std::vector<std::string> tokens;
  tokens.reserve(n_tokens);
  for (std::uint64_t i = 0; i < n_tokens; ++i) tokens.push_back(detail::get_str(in));
  Vocabulary vocab = Vocabulary::from_tokens(tokens);
  LoadedModel lm{cfg, std::move(vocab), Encoder(cfg)};
  std::uint32_t n_arrays = detail::get_u32(in);
  auto& params = lm.encoder.parameters();
  if (n_arrays != params.size()) {
    throw Error(ErrorCode::BadCheckpoint, path + ": parameter count mismatch");
  }
  for (Tensor* t : params) {
    std::string name = detail::get_str(in);
    std::uint64_t count = detail::get_u64(in);
    if (name != t->name || count != t->size()) {
      throw Error(ErrorCode::BadCheckpoint,
                  path + ": array '" + name + "' does not match '" + t->name + "'");
    }
    for (double& v : t->w) v = static_cast<double>(detail::get_f32(in));
  }
  return lm;
}

}  // namespace clozepet
