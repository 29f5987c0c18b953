// Transformer encoder: token/segment/position embeddings followed by N
// post-layer-norm blocks (multi-head self-attention, GELU feedforward),
// an MLM output head and a sigmoid relevance head on the [CLS] vector.
// Forward, exact reverse-mode backward, initialization and parameter
// accounting all live here; everything is templated on the scalar type so
// the test suite can run the identical code in double precision.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dstd/error.hpp"
#include "dstd/rng.hpp"
#include "dstd/tensor.hpp"
#include "dstd/tokenizer.hpp"

namespace dstd {

struct EncoderConfig {
  int layers = 2;        // N
  int hidden = 64;       // d1
  int ffn = 256;         // d2
  int heads = 2;         // h
  int vocab_size = 0;    // V
  int max_positions = 128;  // P
  float dropout_rate = 0.0f;

  int head_dim() const { return hidden / heads; }
};

inline void validate_config(const EncoderConfig& c) {
  require(c.layers >= 0, Errc::invalid_config, "layer count must be >= 0");
  require(c.hidden > 0 && c.ffn > 0 && c.heads > 0 && c.vocab_size > 0 && c.max_positions > 0,
          Errc::invalid_config, "all encoder dimensions must be positive");
  require(c.hidden % c.heads == 0, Errc::invalid_config,
          "hidden size " + std::to_string(c.hidden) + " not divisible by " +
              std::to_string(c.heads) + " heads");
  require(c.dropout_rate >= 0.0f && c.dropout_rate < 1.0f, Errc::invalid_config,
          "dropout rate must be in [0, 1)");
}

template <typename T>
struct LayerParamsT {
  Mat<T> wq, wk, wv, wo;          // d1 x d1, applied as y = x * W + b
  Vec<T> bq, bk, bv, bo;          // d1
  Vec<T> ln1_gain, ln1_bias;      // d1
  Mat<T> ff1_w;                   // d1 x d2
  Vec<T> ff1_b;                   // d2
  Mat<T> ff2_w;                   // d2 x d1
  Vec<T> ff2_b;                   // d1
  Vec<T> ln2_gain, ln2_bias;      // d1
};

template <typename T>
struct ModelParamsT {
  EncoderConfig config;
  Mat<T> tok_emb;                 // V x d1
  Mat<T> seg_emb;                 // 2 x d1
  Mat<T> pos_emb;                 // P x d1
  std::vector<LayerParamsT<T>> layers;
  Mat<T> mlm_w;                   // d1 x V
  Vec<T> mlm_b;                   // V
  Vec<T> scorer_w;                // d1 (the 1 x d1 relevance projection)
  Vec<T> scorer_b;                // 1
};

using ModelParams = ModelParamsT<float>;

template <typename T>
using GradientsT = ModelParamsT<T>;
using Gradients = GradientsT<float>;

template <typename T>
using HiddenStatesT = Mat<T>;
using HiddenStates = Mat<float>;

// Visits every trainable tensor in the canonical (checkpoint) order.
// f(name, pointer, element_count, is_head).
template <typename P, typename F>
void visit_tensors(P& params, F&& f) {
  f("tok_emb", params.tok_emb.data.data(), params.tok_emb.size(), false);
  f("seg_emb", params.seg_emb.data.data(), params.seg_emb.size(), false);
  f("pos_emb", params.pos_emb.data.data(), params.pos_emb.size(), false);
  for (size_t l = 0; l < params.layers.size(); ++l) {
    auto& lp = params.layers[l];
    std::string p = "layer" + std::to_string(l) + ".";
    f((p + "wq").c_str(), lp.wq.data.data(), lp.wq.size(), false);
    f((p + "bq").c_str(), lp.bq.data(), lp.bq.size(), false);
    f((p + "wk").c_str(), lp.wk.data.data(), lp.wk.size(), false);
    f((p + "bk").c_str(), lp.bk.data(), lp.bk.size(), false);
    f((p + "wv").c_str(), lp.wv.data.data(), lp.wv.size(), false);
    f((p + "bv").c_str(), lp.bv.data(), lp.bv.size(), false);
    f((p + "wo").c_str(), lp.wo.data.data(), lp.wo.size(), false);
    f((p + "bo").c_str(), lp.bo.data(), lp.bo.size(), false);
    f((p + "ln1_gain").c_str(), lp.ln1_gain.data(), lp.ln1_gain.size(), false);
    f((p + "ln1_bias").c_str(), lp.ln1_bias.data(), lp.ln1_bias.size(), false);
    f((p + "ff1_w").c_str(), lp.ff1_w.data.data(), lp.ff1_w.size(), false);
    f((p + "ff1_b").c_str(), lp.ff1_b.data(), lp.ff1_b.size(), false);
    f((p + "ff2_w").c_str(), lp.ff2_w.data.data(), lp.ff2_w.size(), false);
    f((p + "ff2_b").c_str(), lp.ff2_b.data(), lp.ff2_b.size(), false);
    f((p + "ln2_gain").c_str(), lp.ln2_gain.data(), lp.ln2_gain.size(), false);
    f((p + "ln2_bias").c_str(), lp.ln2_bias.data(), lp.ln2_bias.size(), false);
  }
  f("mlm_w", params.mlm_w.data.data(), params.mlm_w.size(), true);
  f("mlm_b", params.mlm_b.data(), params.mlm_b.size(), true);
  f("scorer_w", params.scorer_w.data(), params.scorer_w.size(), true);
  f("scorer_b", params.scorer_b.data(), params.scorer_b.size(), true);
}

// Tensor shapes as implied by the config, in the same canonical order.
// f(name, rows, cols, is_head); vectors report rows = 1.
template <typename F>
void for_each_tensor_shape(const EncoderConfig& c, F&& f) {
  f("tok_emb", c.vocab_size, c.hidden, false);
  f("seg_emb", 2, c.hidden, false);
  f("pos_emb", c.max_positions, c.hidden, false);
  for (int l = 0; l < c.layers; ++l) {
    f("wq", c.hidden, c.hidden, false);
    f("bq", 1, c.hidden, false);
    f("wk", c.hidden, c.hidden, false);
    f("bk", 1, c.hidden, false);
    f("wv", c.hidden, c.hidden, false);
    f("bv", 1, c.hidden, false);
    f("wo", c.hidden, c.hidden, false);
    f("bo", 1, c.hidden, false);
    f("ln1_gain", 1, c.hidden, false);
    f("ln1_bias", 1, c.hidden, false);
    f("ff1_w", c.hidden, c.ffn, false);
    f("ff1_b", 1, c.ffn, false);
    f("ff2_w", c.ffn, c.hidden, false);
    f("ff2_b", 1, c.hidden, false);
    f("ln2_gain", 1, c.hidden, false);
    f("ln2_bias", 1, c.hidden, false);
  }
  f("mlm_w", c.hidden, c.vocab_size, true);
  f("mlm_b", 1, c.vocab_size, true);
  f("scorer_w", 1, c.hidden, true);
  f("scorer_b", 1, 1, true);
}

// Trainable parameters of the encoder body (embeddings + layers). The MLM
// and relevance heads are counted separately to keep the headline number
// comparable across encoders that share a body but differ in heads.
inline int64_t count_params(const EncoderConfig& config) {
  validate_config(config);
  int64_t n = 0;
  for_each_tensor_shape(config, [&](const char*, int rows, int cols, bool is_head) {
    if (!is_head) n += static_cast<int64_t>(rows) * cols;
  });
  return n;
}

inline int64_t count_head_params(const EncoderConfig& config) {
  validate_config(config);
  int64_t n = 0;
  for_each_tensor_shape(config, [&](const char*, int rows, int cols, bool is_head) {
    if (is_head) n += static_cast<int64_t>(rows) * cols;
  });
  return n;
}

// Zero-initialized parameter tree with the shapes the config implies.
template <typename T = float>
ModelParamsT<T> alloc_params(const EncoderConfig& config) {
  validate_config(config);
  ModelParamsT<T> p;
  p.config = config;
  p.tok_emb = Mat<T>(config.vocab_size, config.hidden);
  p.seg_emb = Mat<T>(2, config.hidden);
  p.pos_emb = Mat<T>(config.max_positions, config.hidden);
  p.layers.resize(config.layers);
  for (auto& lp : p.layers) {
    lp.wq = Mat<T>(config.hidden, config.hidden);
    lp.wk = Mat<T>(config.hidden, config.hidden);
    lp.wv = Mat<T>(config.hidden, config.hidden);
    lp.wo = Mat<T>(config.hidden, config.hidden);
    lp.bq.assign(config.hidden, T(0));
    lp.bk.assign(config.hidden, T(0));
    lp.bv.assign(config.hidden, T(0));
    lp.bo.assign(config.hidden, T(0));
    lp.ln1_gain.assign(config.hidden, T(0));
    lp.ln1_bias.assign(config.hidden, T(0));
    lp.ff1_w = Mat<T>(config.hidden, config.ffn);
    lp.ff1_b.assign(config.ffn, T(0));
    lp.ff2_w = Mat<T>(config.ffn, config.hidden);
    lp.ff2_b.assign(config.hidden, T(0));
    lp.ln2_gain.assign(config.hidden, T(0));
    lp.ln2_bias.assign(config.hidden, T(0));
  }
  p.mlm_w = Mat<T>(config.hidden, config.vocab_size);
  p.mlm_b.assign(config.vocab_size, T(0));
  p.scorer_w.assign(config.hidden, T(0));
  p.scorer_b.assign(1, T(0));
  return p;
}

// Weights from a truncated normal with stddev 0.02, biases zero, layer-norm
// gains one. Deterministic given the seed.
template <typename T = float>
ModelParamsT<T> init_params(const EncoderConfig& config, uint64_t seed) {
  constexpr double kInitStd = 0.02;
  Rng rng(seed);
  ModelParamsT<T> p = alloc_params<T>(config);

  auto fill_weight = [&](Mat<T>& m) {
    for (T& v : m.data) v = static_cast<T>(rng.truncated_normal(kInitStd));
  };

  fill_weight(p.tok_emb);
  fill_weight(p.seg_emb);
  fill_weight(p.pos_emb);
  for (auto& lp : p.layers) {
    fill_weight(lp.wq);
    fill_weight(lp.wk);
    fill_weight(lp.wv);
    fill_weight(lp.wo);
    std::fill(lp.ln1_gain.begin(), lp.ln1_gain.end(), T(1));
    fill_weight(lp.ff1_w);
    fill_weight(lp.ff2_w);
    std::fill(lp.ln2_gain.begin(), lp.ln2_gain.end(), T(1));
  }
  fill_weight(p.mlm_w);
  for (T& v : p.scorer_w) v = static_cast<T>(rng.truncated_normal(kInitStd));
  return p;
}

template <typename T>
GradientsT<T> zeros_like(const ModelParamsT<T>& params) {
  return alloc_params<T>(params.config);
}

// ---------------------------------------------------------------------------
// Numerics
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-12;
constexpr double kAttentionMaskPenalty = -1e9;

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T gelu_grad(T x) {
  T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  T pdf = T(0.39894228040143267794) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

// Softmax of logits / temperature with max subtraction. Sums accumulate in
// double regardless of T.
template <typename T>
std::vector<T> stable_softmax(const std::vector<T>& logits, double temperature) {
  require(temperature > 0.0, Errc::invalid_config, "temperature must be positive");
  require(!logits.empty(), Errc::length_mismatch, "softmax of empty vector");
  double max_scaled = -std::numeric_limits<double>::infinity();
  for (T v : logits) {
    require(std::isfinite(static_cast<double>(v)), Errc::non_finite, "softmax input not finite");
    max_scaled = std::max(max_scaled, static_cast<double>(v) / temperature);
  }
  std::vector<T> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    double e = std::exp(static_cast<double>(logits[i]) / temperature - max_scaled);
    out[i] = static_cast<T>(e);
    sum += e;
  }
  for (T& v : out) v = static_cast<T>(static_cast<double>(v) / sum);
  return out;
}

// log(softmax(logits / temperature)), in double for downstream loss sums.
template <typename T>
std::vector<double> log_softmax(const T* logits, size_t n, double temperature) {
  double maxv = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) {
    require(std::isfinite(static_cast<double>(logits[i])), Errc::non_finite,
            "log_softmax input not finite");
    maxv = std::max(maxv, static_cast<double>(logits[i]) / temperature);
  }
  double sum = 0.0;
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    out[i] = static_cast<double>(logits[i]) / temperature - maxv;
    sum += std::exp(out[i]);
  }
  double log_sum = std::log(sum);
  for (double& v : out) v -= log_sum;
  return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Number of encoder forward passes executed by this process. The benchmark
// tests use it to confirm a full per-turn scoring pass really happened.
inline std::atomic<uint64_t>& forward_call_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

template <typename T>
struct LayerCache {
  Mat<T> q, k, v;                        // M x d1
  std::vector<Mat<T>> attn_probs;        // per head, M x M, post-softmax pre-dropout
  std::vector<Vec<T>> attn_prob_mask;    // dropout scales; empty = identity
  Mat<T> context;                        // M x d1
  Vec<T> attn_drop_mask;
  Mat<T> ln1_xhat;
  Vec<T> ln1_inv_std;
  Mat<T> ln1_out;
  Mat<T> ff1_pre;                        // M x d2
  Mat<T> ff1_act;
  Vec<T> ff_drop_mask;
  Mat<T> ln2_xhat;
  Vec<T> ln2_inv_std;
  Mat<T> ln2_out;                        // layer output
};

template <typename T>
struct ForwardCache {
  PackedInput input;
  Mat<T> emb_norm;                       // standardized embedding sum, pre-dropout
  Vec<T> emb_inv_std;
  Vec<T> emb_drop_mask;
  Mat<T> embedded;                       // input to the first layer
  std::vector<LayerCache<T>> layers;

  const Mat<T>& final_hidden() const {
    return layers.empty() ? embedded : layers.back().ln2_out;
  }
};

namespace detail {

// Per-row standardization with no learnable parameters.
template <typename T>
void standardize_rows(Mat<T>& x, Vec<T>& inv_std) {
  inv_std.resize(x.rows);
  for (int i = 0; i < x.rows; ++i) {
    T* row = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < x.cols; ++j) mean += row[j];
    mean /= x.cols;
    double var = 0.0;
    for (int j = 0; j < x.cols; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= x.cols;
    double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = static_cast<T>(istd);
    for (int j = 0; j < x.cols; ++j) row[j] = static_cast<T>((row[j] - mean) * istd);
  }
}

template <typename T>
void standardize_backward(const Mat<T>& d_out, const Mat<T>& xhat, const Vec<T>& inv_std,
                          Mat<T>& d_x) {
  int d = xhat.cols;
  for (int i = 0; i < xhat.rows; ++i) {
    const T* dy = d_out.row(i);
    const T* xh = xhat.row(i);
    double mean_dy = 0.0, mean_dy_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      mean_dy += dy[j];
      mean_dy_xhat += static_cast<double>(dy[j]) * xh[j];
    }
    mean_dy /= d;
    mean_dy_xhat /= d;
    T* dx = d_x.row(i);
    for (int j = 0; j < d; ++j)
      dx[j] = static_cast<T>(inv_std[i] * (dy[j] - mean_dy - xh[j] * mean_dy_xhat));
  }
}

template <typename T>
void apply_dropout(Mat<T>& x, Vec<T>& mask, Rng* rng, double rate) {
  if (rng == nullptr || rate <= 0.0) return;
  mask.resize(x.size());
  T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (size_t i = 0; i < x.data.size(); ++i) {
    mask[i] = rng->uniform() < rate ? T(0) : scale;
    x.data[i] *= mask[i];
  }
}

template <typename T>
void layer_norm(const Mat<T>& x, const Vec<T>& gain, const Vec<T>& bias, Mat<T>& xhat,
                Vec<T>& inv_std, Mat<T>& out) {
  int d = x.cols;
  xhat = Mat<T>(x.rows, d);
  out = Mat<T>(x.rows, d);
  inv_std.resize(x.rows);
  for (int i = 0; i < x.rows; ++i) {
    const T* row = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = static_cast<T>(istd);
    T* xh = xhat.row(i);
    T* o = out.row(i);
    for (int j = 0; j < d; ++j) {
      xh[j] = static_cast<T>((row[j] - mean) * istd);
      o[j] = xh[j] * gain[j] + bias[j];
    }
  }
}

// dY -> dX (accumulated), plus gain/bias gradients.
template <typename T>
void layer_norm_backward(const Mat<T>& d_out, const Mat<T>& xhat, const Vec<T>& inv_std,
                         const Vec<T>& gain, Mat<T>& d_x, Vec<T>& d_gain, Vec<T>& d_bias) {
  int d = xhat.cols;
  for (int i = 0; i < xhat.rows; ++i) {
    const T* dy = d_out.row(i);
    const T* xh = xhat.row(i);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      double dxh = static_cast<double>(dy[j]) * gain[j];
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xh[j];
      d_gain[j] += dy[j] * xh[j];
      d_bias[j] += dy[j];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    T* dx = d_x.row(i);
    for (int j = 0; j < d; ++j) {
      double dxh = static_cast<double>(dy[j]) * gain[j];
      dx[j] += static_cast<T>(inv_std[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat));
    }
  }
}

}  // namespace detail

// Runs the encoder and keeps every intermediate needed for the backward
// pass. Dropout is sampled from rng only when train_mode is set and the
// configured rate is positive.
template <typename T>
ForwardCache<T> forward_cached(const ModelParamsT<T>& params, const PackedInput& input,
                               bool train_mode = false, Rng* rng = nullptr) {
  const EncoderConfig& cfg = params.config;
  const int m = input.length();
  require(m > 0, Errc::input_too_long, "empty input");
  require(m <= cfg.max_positions, Errc::input_too_long,
          "input of length " + std::to_string(m) + " exceeds max positions " +
              std::to_string(cfg.max_positions));
  forward_call_counter().fetch_add(1, std::memory_order_relaxed);

  Rng* drop_rng = (train_mode && cfg.dropout_rate > 0.0f) ? rng : nullptr;
  if (train_mode && cfg.dropout_rate > 0.0f)
    require(rng != nullptr, Errc::invalid_config, "training forward with dropout needs an rng");

  ForwardCache<T> cache;
  cache.input = input;

  // Embedding sum, standardized per position. The normalization carries no
  // learnable gain/bias; it only brings the first layer's inputs to unit
  // scale the way the trained embedding layer norm does in stock BERT.
  cache.embedded = Mat<T>(m, cfg.hidden);
  for (int i = 0; i < m; ++i) {
    int id = input.ids[i];
    require(id >= 0 && id < cfg.vocab_size, Errc::id_out_of_range,
            "token id " + std::to_string(id) + " outside vocab of " +
                std::to_string(cfg.vocab_size));
    int seg = input.segment_ids[i];
    require(seg == 0 || seg == 1, Errc::id_out_of_range, "segment id must be 0 or 1");
    const T* tok = params.tok_emb.row(id);
    const T* sg = params.seg_emb.row(seg);
    const T* ps = params.pos_emb.row(i);
    T* out = cache.embedded.row(i);
    for (int j = 0; j < cfg.hidden; ++j) out[j] = tok[j] + sg[j] + ps[j];
  }
  detail::standardize_rows(cache.embedded, cache.emb_inv_std);
  cache.emb_norm = cache.embedded;
  detail::apply_dropout(cache.embedded, cache.emb_drop_mask, drop_rng, cfg.dropout_rate);

  // Additive attention mask per key position.
  std::vector<T> key_penalty(m);
  for (int j = 0; j < m; ++j)
    key_penalty[j] = input.attention_mask[j] ? T(0) : T(kAttentionMaskPenalty);

  const int dk = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  cache.layers.resize(cfg.layers);
  const Mat<T>* x = &cache.embedded;
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerParamsT<T>& lp = params.layers[l];
    LayerCache<T>& lc = cache.layers[l];

    linear(*x, lp.wq, lp.bq, lc.q);
    linear(*x, lp.wk, lp.bk, lc.k);
    linear(*x, lp.wv, lp.bv, lc.v);

    lc.attn_probs.assign(cfg.heads, Mat<T>(m, m));
    lc.attn_prob_mask.assign(cfg.heads, Vec<T>());
    lc.context = Mat<T>(m, cfg.hidden);
    for (int h = 0; h < cfg.heads; ++h) {
      int off = h * dk;
      Mat<T>& probs = lc.attn_probs[h];
      for (int i = 0; i < m; ++i) {
        const T* qi = lc.q.row(i) + off;
        T* prow = probs.row(i);
        T row_max = std::numeric_limits<T>::lowest();
        for (int j = 0; j < m; ++j) {
          const T* kj = lc.k.row(j) + off;
          T s = T(0);
          for (int t = 0; t < dk; ++t) s += qi[t] * kj[t];
          s = s * scale + key_penalty[j];
          prow[j] = s;
          row_max = std::max(row_max, s);
        }
        double sum = 0.0;
        for (int j = 0; j < m; ++j) {
          double e = std::exp(static_cast<double>(prow[j] - row_max));
          prow[j] = static_cast<T>(e);
          sum += e;
        }
        for (int j = 0; j < m; ++j) prow[j] = static_cast<T>(prow[j] / sum);
      }

      // Attention dropout operates on a copy so the softmax probabilities
      // stay available for the backward pass.
      const Mat<T>* use_probs = &probs;
      Mat<T> dropped;
      if (drop_rng != nullptr) {
        dropped = probs;
        detail::apply_dropout(dropped, lc.attn_prob_mask[h], drop_rng, cfg.dropout_rate);
        use_probs = &dropped;
      }
      for (int i = 0; i < m; ++i) {
        const T* prow = use_probs->row(i);
        T* crow = lc.context.row(i) + off;
        for (int j = 0; j < m; ++j) {
          T p = prow[j];
          const T* vj = lc.v.row(j) + off;
          for (int t = 0; t < dk; ++t) crow[t] += p * vj[t];
        }
      }
    }

    Mat<T> attn_out;
    linear(lc.context, lp.wo, lp.bo, attn_out);
    detail::apply_dropout(attn_out, lc.attn_drop_mask, drop_rng, cfg.dropout_rate);
    for (size_t i = 0; i < attn_out.data.size(); ++i) attn_out.data[i] += x->data[i];
    detail::layer_norm(attn_out, lp.ln1_gain, lp.ln1_bias, lc.ln1_xhat, lc.ln1_inv_std,
                       lc.ln1_out);

    linear(lc.ln1_out, lp.ff1_w, lp.ff1_b, lc.ff1_pre);
    lc.ff1_act = Mat<T>(m, cfg.ffn);
    for (size_t i = 0; i < lc.ff1_pre.data.size(); ++i)
      lc.ff1_act.data[i] = gelu(lc.ff1_pre.data[i]);

    Mat<T> ff_out;
    linear(lc.ff1_act, lp.ff2_w, lp.ff2_b, ff_out);
    detail::apply_dropout(ff_out, lc.ff_drop_mask, drop_rng, cfg.dropout_rate);
    for (size_t i = 0; i < ff_out.data.size(); ++i) ff_out.data[i] += lc.ln1_out.data[i];
    detail::layer_norm(ff_out, lp.ln2_gain, lp.ln2_bias, lc.ln2_xhat, lc.ln2_inv_std,
                       lc.ln2_out);

    x = &lc.ln2_out;
  }
  return cache;
}

template <typename T>
HiddenStatesT<T> forward(const ModelParamsT<T>& params, const PackedInput& input,
                         bool train_mode = false, Rng* rng = nullptr) {
  ForwardCache<T> cache = forward_cached(params, input, train_mode, rng);
  return cache.layers.empty() ? std::move(cache.embedded) : std::move(cache.layers.back().ln2_out);
}

// Pre-softmax vocabulary logits for every position: hidden * mlm_w + mlm_b.
template <typename T>
Mat<T> mlm_logits(const ModelParamsT<T>& params, const Mat<T>& hidden) {
  Mat<T> logits;
  linear(hidden, params.mlm_w, params.mlm_b, logits);
  return logits;
}

// Same projection restricted to a handful of positions.
template <typename T>
Mat<T> mlm_logits_at(const ModelParamsT<T>& params, const Mat<T>& hidden,
                     const std::vector<int>& positions) {
  const int v = params.config.vocab_size;
  Mat<T> logits(static_cast<int>(positions.size()), v);
  for (size_t r = 0; r < positions.size(); ++r) {
    const T* h = hidden.row(positions[r]);
    T* out = logits.row(r);
    for (int j = 0; j < v; ++j) out[j] = params.mlm_b[j];
    for (int i = 0; i < params.config.hidden; ++i) {
      T hv = h[i];
      const T* wrow = params.mlm_w.row(i);
      for (int j = 0; j < v; ++j) out[j] += hv * wrow[j];
    }
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Propagates d(loss)/d(final hidden states) back through every layer and the
// embeddings, accumulating into grads. Head gradients (MLM, scorer) are the
// caller's responsibility since they depend on the loss.
template <typename T>
void backward_from_hidden(const ModelParamsT<T>& params, const ForwardCache<T>& cache,
                          const Mat<T>& d_hidden, GradientsT<T>& grads) {
  const EncoderConfig& cfg = params.config;
  const int m = cache.input.length();
  const int dk = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  Mat<T> d_out = d_hidden;  // gradient w.r.t. current layer output
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerParamsT<T>& lp = params.layers[l];
    LayerParamsT<T>& gp = grads.layers[l];
    const LayerCache<T>& lc = cache.layers[l];
    const Mat<T>& x_in = (l == 0) ? cache.embedded : cache.layers[l - 1].ln2_out;

    // LN2
    Mat<T> d_resid2(m, cfg.hidden);
    detail::layer_norm_backward(d_out, lc.ln2_xhat, lc.ln2_inv_std, lp.ln2_gain, d_resid2,
                                gp.ln2_gain, gp.ln2_bias);

    // Residual: d_resid2 flows to ln1_out and, through dropout, to ff output.
    Mat<T> d_ff2 = d_resid2;
    if (!lc.ff_drop_mask.empty())
      for (size_t i = 0; i < d_ff2.data.size(); ++i) d_ff2.data[i] *= lc.ff_drop_mask[i];

    // FF second linear.
    matmul_tn_acc(lc.ff1_act, d_ff2, gp.ff2_w);
    add_col_sums(d_ff2, gp.ff2_b);
    Mat<T> d_ff1_act(m, cfg.ffn);
    matmul_nt_acc(d_ff2, lp.ff2_w, d_ff1_act);

    // GELU.
    Mat<T> d_ff1_pre(m, cfg.ffn);
    for (size_t i = 0; i < d_ff1_pre.data.size(); ++i)
      d_ff1_pre.data[i] = d_ff1_act.data[i] * gelu_grad(lc.ff1_pre.data[i]);

    // FF first linear.
    matmul_tn_acc(lc.ln1_out, d_ff1_pre, gp.ff1_w);
    add_col_sums(d_ff1_pre, gp.ff1_b);
    Mat<T> d_ln1_out = d_resid2;  // residual branch
    matmul_nt_acc(d_ff1_pre, lp.ff1_w, d_ln1_out);

    // LN1
    Mat<T> d_resid1(m, cfg.hidden);
    detail::layer_norm_backward(d_ln1_out, lc.ln1_xhat, lc.ln1_inv_std, lp.ln1_gain, d_resid1,
                                gp.ln1_gain, gp.ln1_bias);

    Mat<T> d_attn_out = d_resid1;
    if (!lc.attn_drop_mask.empty())
      for (size_t i = 0; i < d_attn_out.data.size(); ++i)
        d_attn_out.data[i] *= lc.attn_drop_mask[i];

    // Output projection.
    matmul_tn_acc(lc.context, d_attn_out, gp.wo);
    add_col_sums(d_attn_out, gp.bo);
    Mat<T> d_context(m, cfg.hidden);
    matmul_nt_acc(d_attn_out, lp.wo, d_context);

    // Attention heads.
    Mat<T> d_q(m, cfg.hidden), d_k(m, cfg.hidden), d_v(m, cfg.hidden);
    for (int h = 0; h < cfg.heads; ++h) {
      int off = h * dk;
      const Mat<T>& probs = lc.attn_probs[h];
      const Vec<T>& pmask = lc.attn_prob_mask[h];

      // dP~ = dC V^T ; dV += P~^T dC
      Mat<T> d_probs(m, m);
      for (int i = 0; i < m; ++i) {
        const T* dci = d_context.row(i) + off;
        T* dpi = d_probs.row(i);
        for (int j = 0; j < m; ++j) {
          const T* vj = lc.v.row(j) + off;
          T acc = T(0);
          for (int t = 0; t < dk; ++t) acc += dci[t] * vj[t];
          dpi[j] = acc;
        }
      }
      for (int i = 0; i < m; ++i) {
        const T* pi = probs.row(i);
        const T* dci = d_context.row(i) + off;
        for (int j = 0; j < m; ++j) {
          T p = pi[j];
          if (!pmask.empty()) p *= pmask[static_cast<size_t>(i) * m + j];
          T* dvj = d_v.row(j) + off;
          for (int t = 0; t < dk; ++t) dvj[t] += p * dci[t];
        }
      }
      if (!pmask.empty())
        for (size_t i = 0; i < d_probs.data.size(); ++i) d_probs.data[i] *= pmask[i];

      // Softmax jacobian per row: dS = P o (dP - sum_j dP o P).
      for (int i = 0; i < m; ++i) {
        const T* pi = probs.row(i);
        T* dpi = d_probs.row(i);
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += static_cast<double>(dpi[j]) * pi[j];
        for (int j = 0; j < m; ++j)
          dpi[j] = static_cast<T>(pi[j] * (static_cast<double>(dpi[j]) - dot));
      }

      // dQ += dS K * scale ; dK += dS^T Q * scale
      for (int i = 0; i < m; ++i) {
        const T* dsi = d_probs.row(i);
        T* dqi = d_q.row(i) + off;
        const T* qi = lc.q.row(i) + off;
        for (int j = 0; j < m; ++j) {
          T dsv = dsi[j] * scale;
          const T* kj = lc.k.row(j) + off;
          T* dkj = d_k.row(j) + off;
          for (int t = 0; t < dk; ++t) {
            dqi[t] += dsv * kj[t];
            dkj[t] += dsv * qi[t];
          }
        }
      }
    }

    // Input projections; gradient joins the residual branch.
    matmul_tn_acc(x_in, d_q, gp.wq);
    add_col_sums(d_q, gp.bq);
    matmul_tn_acc(x_in, d_k, gp.wk);
    add_col_sums(d_k, gp.bk);
    matmul_tn_acc(x_in, d_v, gp.wv);
    add_col_sums(d_v, gp.bv);

    Mat<T> d_x = d_resid1;  // residual path
    matmul_nt_acc(d_q, lp.wq, d_x);
    matmul_nt_acc(d_k, lp.wk, d_x);
    matmul_nt_acc(d_v, lp.wv, d_x);
    d_out = std::move(d_x);
  }

  // Embeddings: back through dropout, then the standardization, then the
  // three lookup tables.
  if (!cache.emb_drop_mask.empty())
    for (size_t i = 0; i < d_out.data.size(); ++i) d_out.data[i] *= cache.emb_drop_mask[i];
  Mat<T> d_emb(m, cfg.hidden);
  detail::standardize_backward(d_out, cache.emb_norm, cache.emb_inv_std, d_emb);
  d_out = std::move(d_emb);
  for (int i = 0; i < m; ++i) {
    const T* d = d_out.row(i);
    T* tok = grads.tok_emb.row(cache.input.ids[i]);
    T* seg = grads.seg_emb.row(cache.input.segment_ids[i]);
    T* pos = grads.pos_emb.row(i);
    for (int j = 0; j < cfg.hidden; ++j) {
      tok[j] += d[j];
      seg[j] += d[j];
      pos[j] += d[j];
    }
  }
}

// Reverse-mode gradients of a scalar loss over a batch. The loss callback
// receives the hidden states for one example and must fill in
// d(loss)/d(hidden) plus any head gradients; the shared body backward then
// accumulates the rest. Returns the summed loss.
//
// LossFn: double(size_t example_index, const ForwardCache<T>&, Mat<T>& d_hidden,
//                GradientsT<T>& grads)
template <typename T, typename LossFn>
std::pair<double, GradientsT<T>> compute_gradients(const ModelParamsT<T>& params,
                                                   std::span<const PackedInput> batch,
                                                   LossFn&& loss_fn, bool train_mode = false,
                                                   Rng* rng = nullptr) {
  GradientsT<T> grads = zeros_like(params);
  double total_loss = 0.0;
  for (size_t idx = 0; idx < batch.size(); ++idx) {
    ForwardCache<T> cache = forward_cached(params, batch[idx], train_mode, rng);
    Mat<T> d_hidden(batch[idx].length(), params.config.hidden);
    total_loss += loss_fn(idx, cache, d_hidden, grads);
    backward_from_hidden(params, cache, d_hidden, grads);
  }
  require(std::isfinite(total_loss), Errc::non_finite, "loss is not finite");
  return {total_loss, std::move(grads)};
}

}  // namespace dstd
