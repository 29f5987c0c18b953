// Masked-LM pretraining and knowledge distillation. The teacher is trained
// with the standard masked-token cross-entropy; the student is trained from
// scratch to match the teacher's temperature-softened token distributions,
// summed over the sentence.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dstd/encoder.hpp"
#include "dstd/error.hpp"
#include "dstd/optimizer.hpp"
#include "dstd/rng.hpp"
#include "dstd/tokenizer.hpp"

namespace dstd {

struct MaskedExample {
  PackedInput input;                 // with [MASK] substituted
  std::vector<int> masked_positions;
  std::vector<int> original_ids;     // ids at those positions before masking
};

enum class LossPositions { all_tokens, masked_only };

struct DistillConfig {
  double temperature = 10.0;
  double mask_rate = 0.15;
  LossPositions loss_positions = LossPositions::all_tokens;
  int steps = 1000;
  int batch_size = 16;
  OptimizerHyper opt;
  int warmup_steps = 50;
  int max_len = 32;
  double holdout_fraction = 0.05;
  uint64_t seed = 1;
};

inline bool maskable_position(const PackedInput& packed, int i) {
  return packed.attention_mask[i] == 1 && packed.ids[i] >= kNumSpecialTokens;
}

// Positions that contribute to the sentence distillation loss in all_tokens
// mode: everything real except [CLS] and [SEP]. Masked positions count.
inline bool distillable_position(const PackedInput& packed, int i) {
  return packed.attention_mask[i] == 1 && packed.ids[i] != kClsId && packed.ids[i] != kSepId &&
         packed.ids[i] != kPadId;
}

// Replaces round(rate * maskable), at least one, positions with [MASK],
// chosen uniformly without replacement.
inline MaskedExample mask_sentence(const PackedInput& packed, double rate, Rng& rng) {
  std::vector<int> maskable;
  for (int i = 0; i < packed.length(); ++i)
    if (maskable_position(packed, i)) maskable.push_back(i);
  require(!maskable.empty(), Errc::nothing_to_mask, "no maskable positions in input");

  size_t want = static_cast<size_t>(
      std::max<long>(1, std::lround(rate * static_cast<double>(maskable.size()))));
  want = std::min(want, maskable.size());

  // Partial Fisher-Yates: the first `want` entries end up a uniform sample.
  for (size_t i = 0; i < want; ++i) {
    size_t j = i + static_cast<size_t>(rng.below(maskable.size() - i));
    std::swap(maskable[i], maskable[j]);
  }
  maskable.resize(want);
  std::sort(maskable.begin(), maskable.end());

  MaskedExample ex;
  ex.input = packed;
  ex.masked_positions = maskable;
  for (int pos : maskable) {
    ex.original_ids.push_back(packed.ids[pos]);
    ex.input.ids[pos] = kMaskId;
  }
  return ex;
}

// Cross-entropy H(softmax(a_T / tau), softmax(a_S / tau)). Only the student
// side is ever differentiated; the teacher distribution is a constant.
template <typename T>
double token_distill_loss(const std::vector<T>& teacher_logits,
                          const std::vector<T>& student_logits, double tau) {
  require(teacher_logits.size() == student_logits.size(), Errc::length_mismatch,
          "teacher and student logit vectors differ in length");
  require(!teacher_logits.empty(), Errc::length_mismatch, "empty logit vectors");
  std::vector<double> log_p = log_softmax(teacher_logits.data(), teacher_logits.size(), tau);
  std::vector<double> log_q = log_softmax(student_logits.data(), student_logits.size(), tau);
  double loss = 0.0;
  for (size_t i = 0; i < log_p.size(); ++i) loss -= std::exp(log_p[i]) * log_q[i];
  return loss;
}

namespace detail {

template <typename T>
std::vector<int> loss_positions_of(const MaskedExample& ex, LossPositions mode) {
  if (mode == LossPositions::masked_only) return ex.masked_positions;
  std::vector<int> positions;
  for (int i = 0; i < ex.input.length(); ++i)
    if (distillable_position(ex.input, i)) positions.push_back(i);
  return positions;
}

}  // namespace detail

// Sum of per-token distillation losses over the selected positions of one
// masked sentence.
template <typename T>
double sentence_distill_loss(const ModelParamsT<T>& teacher, const ModelParamsT<T>& student,
                             const MaskedExample& example, const DistillConfig& config) {
  require(teacher.config.vocab_size == student.config.vocab_size, Errc::vocab_mismatch,
          "teacher and student vocabularies differ");
  std::vector<int> positions = detail::loss_positions_of<T>(example, config.loss_positions);
  if (positions.empty()) return 0.0;

  Mat<T> teacher_hidden = forward(teacher, example.input);
  Mat<T> student_hidden = forward(student, example.input);
  Mat<T> t_logits = mlm_logits_at(teacher, teacher_hidden, positions);
  Mat<T> s_logits = mlm_logits_at(student, student_hidden, positions);

  const int v = teacher.config.vocab_size;
  double loss = 0.0;
  for (int r = 0; r < t_logits.rows; ++r) {
    std::vector<double> log_p = log_softmax(t_logits.row(r), v, config.temperature);
    std::vector<double> log_q = log_softmax(s_logits.row(r), v, config.temperature);
    for (int j = 0; j < v; ++j) loss -= std::exp(log_p[j]) * log_q[j];
  }
  return loss;
}

// Batch distillation loss with gradients w.r.t. the student. Loss is the
// mean over sentences of the per-sentence sums. Teacher stays untouched.
template <typename T>
double distill_loss_and_grads(const ModelParamsT<T>& teacher, const ModelParamsT<T>& student,
                              std::span<const MaskedExample> batch, const DistillConfig& config,
                              GradientsT<T>* grads) {
  require(teacher.config.vocab_size == student.config.vocab_size, Errc::vocab_mismatch,
          "teacher and student vocabularies differ");
  if (batch.empty()) return 0.0;
  const int v = student.config.vocab_size;
  const int d1 = student.config.hidden;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  if (grads == nullptr) {
    double total = 0.0;
    for (const MaskedExample& ex : batch)
      total += sentence_distill_loss(teacher, student, ex, config) * inv_batch;
    return total;
  }

  std::vector<PackedInput> inputs;
  inputs.reserve(batch.size());
  for (const MaskedExample& ex : batch) inputs.push_back(ex.input);

  auto loss_fn = [&](size_t idx, const ForwardCache<T>& cache, Mat<T>& d_hidden,
                     GradientsT<T>& g) -> double {
    const MaskedExample& ex = batch[idx];
    std::vector<int> positions = detail::loss_positions_of<T>(ex, config.loss_positions);
    d_hidden.zero();
    if (positions.empty()) return 0.0;

    Mat<T> teacher_hidden = forward(teacher, ex.input);
    Mat<T> t_logits = mlm_logits_at(teacher, teacher_hidden, positions);
    Mat<T> s_logits = mlm_logits_at(student, cache.final_hidden(), positions);

    double loss = 0.0;
    for (size_t r = 0; r < positions.size(); ++r) {
      std::vector<double> log_p = log_softmax(t_logits.row(static_cast<int>(r)), v,
                                              config.temperature);
      std::vector<double> log_q = log_softmax(s_logits.row(static_cast<int>(r)), v,
                                              config.temperature);
      std::vector<T> d_logits(v);
      for (int j = 0; j < v; ++j) {
        double p = std::exp(log_p[j]);
        double q = std::exp(log_q[j]);
        loss -= p * log_q[j];
        d_logits[j] = static_cast<T>((q - p) / config.temperature * inv_batch);
      }
      // Through the MLM head.
      const int pos = positions[r];
      const T* h = cache.final_hidden().row(pos);
      T* dh = d_hidden.row(pos);
      for (int i = 0; i < d1; ++i) {
        const T* wrow = student.mlm_w.row(i);
        T* gwrow = g.mlm_w.row(i);
        T acc = T(0);
        for (int j = 0; j < v; ++j) {
          acc += wrow[j] * d_logits[j];
          gwrow[j] += h[i] * d_logits[j];
        }
        dh[i] += acc;
      }
      for (int j = 0; j < v; ++j) g.mlm_b[j] += d_logits[j];
    }
    return loss * inv_batch;
  };

  auto [loss, g] = compute_gradients(student, std::span<const PackedInput>(inputs), loss_fn);
  *grads = std::move(g);
  return loss;
}

// Standard masked-LM cross-entropy (mean per masked token) with gradients.
template <typename T>
double mlm_ce_loss_and_grads(const ModelParamsT<T>& params, std::span<const MaskedExample> batch,
                             GradientsT<T>* grads) {
  int64_t total_masked = 0;
  for (const MaskedExample& ex : batch) total_masked += ex.masked_positions.size();
  if (total_masked == 0) return 0.0;
  const int v = params.config.vocab_size;
  const int d1 = params.config.hidden;
  const double inv_n = 1.0 / static_cast<double>(total_masked);

  if (grads == nullptr) {
    double total = 0.0;
    for (const MaskedExample& ex : batch) {
      Mat<T> hidden = forward(params, ex.input);
      Mat<T> logits = mlm_logits_at(params, hidden, ex.masked_positions);
      for (size_t r = 0; r < ex.masked_positions.size(); ++r) {
        std::vector<double> log_q = log_softmax(logits.row(static_cast<int>(r)), v, 1.0);
        total -= log_q[ex.original_ids[r]] * inv_n;
      }
    }
    return total;
  }

  std::vector<PackedInput> inputs;
  inputs.reserve(batch.size());
  for (const MaskedExample& ex : batch) inputs.push_back(ex.input);

  auto loss_fn = [&](size_t idx, const ForwardCache<T>& cache, Mat<T>& d_hidden,
                     GradientsT<T>& g) -> double {
    const MaskedExample& ex = batch[idx];
    d_hidden.zero();
    if (ex.masked_positions.empty()) return 0.0;
    Mat<T> logits = mlm_logits_at(params, cache.final_hidden(), ex.masked_positions);
    double loss = 0.0;
    for (size_t r = 0; r < ex.masked_positions.size(); ++r) {
      std::vector<double> log_q = log_softmax(logits.row(static_cast<int>(r)), v, 1.0);
      int target = ex.original_ids[r];
      loss -= log_q[target] * inv_n;
      const int pos = ex.masked_positions[r];
      const T* h = cache.final_hidden().row(pos);
      T* dh = d_hidden.row(pos);
      std::vector<T> d_logits(v);
      for (int j = 0; j < v; ++j)
        d_logits[j] = static_cast<T>((std::exp(log_q[j]) - (j == target ? 1.0 : 0.0)) * inv_n);
      for (int i = 0; i < d1; ++i) {
        const T* wrow = params.mlm_w.row(i);
        T* gwrow = g.mlm_w.row(i);
        T acc = T(0);
        for (int j = 0; j < v; ++j) {
          acc += wrow[j] * d_logits[j];
          gwrow[j] += h[i] * d_logits[j];
        }
        dh[i] += acc;
      }
      for (int j = 0; j < v; ++j) g.mlm_b[j] += d_logits[j];
    }
    return loss;
  };

  auto [loss, g] = compute_gradients(params, std::span<const PackedInput>(inputs), loss_fn);
  *grads = std::move(g);
  return loss;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int steps = 1000;
  int batch_size = 16;
  OptimizerHyper opt;
  int warmup_steps = 50;
  double mask_rate = 0.15;
  int max_len = 32;
  double holdout_fraction = 0.05;
  uint64_t seed = 1;
};

struct PretrainResult {
  ModelParams params;
  double final_train_loss = 0.0;
  double holdout_accuracy = 0.0;
  int64_t holdout_masked_tokens = 0;
  int64_t steps = 0;
};

namespace detail {

inline std::vector<PackedInput> pack_corpus(const std::vector<std::string>& corpus,
                                            const Vocab& vocab, int max_len) {
  std::vector<PackedInput> packed;
  packed.reserve(corpus.size());
  for (const std::string& line : corpus) {
    TokenSequence seq = tokenize(line, vocab);
    if (seq.empty()) continue;
    PackedInput p = pack_single(seq, max_len);
    bool has_maskable = false;
    for (int i = 0; i < p.length() && !has_maskable; ++i)
      has_maskable = maskable_position(p, i);
    if (has_maskable) packed.push_back(p);
  }
  return packed;
}

// Deterministic tail split: the last fraction of sentences is held out.
inline size_t holdout_start(size_t n, double fraction) {
  size_t holdout = std::max<size_t>(1, static_cast<size_t>(n * fraction));
  return n > holdout ? n - holdout : 0;
}

// Fixed-seed masking so evaluation is reproducible.
inline std::vector<MaskedExample> mask_examples(std::span<const PackedInput> packed,
                                                double rate, uint64_t seed) {
  std::vector<MaskedExample> out;
  out.reserve(packed.size());
  for (size_t i = 0; i < packed.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    out.push_back(mask_sentence(packed[i], rate, rng));
  }
  return out;
}

}  // namespace detail

// Fraction of masked positions whose argmax MLM prediction recovers the
// original token.
template <typename T>
double masked_token_accuracy(const ModelParamsT<T>& params,
                             std::span<const MaskedExample> examples) {
  int64_t hits = 0, total = 0;
  for (const MaskedExample& ex : examples) {
    Mat<T> hidden = forward(params, ex.input);
    Mat<T> logits = mlm_logits_at(params, hidden, ex.masked_positions);
    for (size_t r = 0; r < ex.masked_positions.size(); ++r) {
      const T* row = logits.row(static_cast<int>(r));
      int best = 0;
      for (int j = 1; j < params.config.vocab_size; ++j)
        if (row[j] > row[best]) best = j;
      hits += (best == ex.original_ids[r]);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// Masked-LM pretraining from random initialization.
inline PretrainResult pretrain_teacher(const EncoderConfig& config,
                                       const std::vector<std::string>& corpus, const Vocab& vocab,
                                       const PretrainConfig& cfg) {
  require(!corpus.empty(), Errc::empty_corpus, "pretraining corpus is empty");
  require(config.vocab_size == vocab.size(), Errc::vocab_mismatch,
          "config vocab size does not match vocabulary");

  std::vector<PackedInput> packed = detail::pack_corpus(corpus, vocab, cfg.max_len);
  require(!packed.empty(), Errc::empty_corpus, "corpus has no usable sentences");
  size_t split = detail::holdout_start(packed.size(), cfg.holdout_fraction);
  std::span<const PackedInput> train(packed.data(), split);
  std::span<const PackedInput> holdout(packed.data() + split, packed.size() - split);
  require(!train.empty(), Errc::empty_corpus, "corpus too small for a train/holdout split");

  PretrainResult result;
  result.params = init_params(config, derive_seed(cfg.seed, 0x11));
  AdamState adam = init_adam_state(result.params);

  Rng order_rng(derive_seed(cfg.seed, 0x22));
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);

  size_t cursor = 0;
  uint64_t mask_counter = 0;
  double recent_loss = 0.0;
  std::vector<MaskedExample> batch;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      Rng mask_rng(derive_seed(cfg.seed, 0x1000 + mask_counter++));
      batch.push_back(mask_sentence(train[order[cursor++]], cfg.mask_rate, mask_rng));
    }
    Gradients grads = zeros_like(result.params);
    recent_loss = mlm_ce_loss_and_grads<float>(result.params, batch, &grads);
    OptimizerHyper hyper = cfg.opt;
    if (cfg.warmup_steps > 0)
      hyper.lr *= std::min(1.0, double(step + 1) / cfg.warmup_steps);
    optimizer_step(result.params, grads, adam, hyper);
    ++result.steps;
  }
  result.final_train_loss = recent_loss;

  std::vector<MaskedExample> holdout_masked =
      detail::mask_examples(holdout, cfg.mask_rate, derive_seed(cfg.seed, 0x33));
  result.holdout_accuracy = masked_token_accuracy(result.params, holdout_masked);
  for (const MaskedExample& ex : holdout_masked)
    result.holdout_masked_tokens += ex.masked_positions.size();
  return result;
}

struct DistillResult {
  ModelParams student;
  double holdout_loss_initial = 0.0;
  double holdout_loss_final = 0.0;
  double student_holdout_accuracy = 0.0;
  double teacher_holdout_accuracy = 0.0;
  int64_t steps = 0;
};

// Trains a fresh student to match the frozen teacher's softened MLM
// distributions over the corpus.
inline DistillResult distill(const ModelParams& teacher, const EncoderConfig& student_config,
                             const std::vector<std::string>& corpus, const Vocab& vocab,
                             const DistillConfig& cfg) {
  require(!corpus.empty(), Errc::empty_corpus, "distillation corpus is empty");
  require(student_config.vocab_size == teacher.config.vocab_size, Errc::vocab_mismatch,
          "student vocab size must match the teacher");
  require(student_config.vocab_size == vocab.size(), Errc::vocab_mismatch,
          "config vocab size does not match vocabulary");

  std::vector<PackedInput> packed = detail::pack_corpus(corpus, vocab, cfg.max_len);
  require(!packed.empty(), Errc::empty_corpus, "corpus has no usable sentences");
  size_t split = detail::holdout_start(packed.size(), cfg.holdout_fraction);
  std::span<const PackedInput> train(packed.data(), split);
  std::span<const PackedInput> holdout(packed.data() + split, packed.size() - split);
  require(!train.empty(), Errc::empty_corpus, "corpus too small for a train/holdout split");

  std::vector<MaskedExample> holdout_masked =
      detail::mask_examples(holdout, cfg.mask_rate, derive_seed(cfg.seed, 0x44));

  DistillResult result;
  result.student = init_params(student_config, derive_seed(cfg.seed, 0x55));
  result.holdout_loss_initial =
      distill_loss_and_grads<float>(teacher, result.student, holdout_masked, cfg, nullptr);

  AdamState adam = init_adam_state(result.student);
  Rng order_rng(derive_seed(cfg.seed, 0x66));
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);

  size_t cursor = 0;
  uint64_t mask_counter = 0;
  std::vector<MaskedExample> batch;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      Rng mask_rng(derive_seed(cfg.seed, 0x2000 + mask_counter++));
      batch.push_back(mask_sentence(train[order[cursor++]], cfg.mask_rate, mask_rng));
    }
    Gradients grads = zeros_like(result.student);
    distill_loss_and_grads<float>(teacher, result.student, batch, cfg, &grads);
    OptimizerHyper hyper = cfg.opt;
    if (cfg.warmup_steps > 0)
      hyper.lr *= std::min(1.0, double(step + 1) / cfg.warmup_steps);
    optimizer_step(result.student, grads, adam, hyper);
    ++result.steps;
  }

  result.holdout_loss_final =
      distill_loss_and_grads<float>(teacher, result.student, holdout_masked, cfg, nullptr);
  result.student_holdout_accuracy = masked_token_accuracy(result.student, holdout_masked);
  result.teacher_holdout_accuracy = masked_token_accuracy(teacher, holdout_masked);
  result.steps = cfg.steps;
  return result;
}

}  // namespace dstd
