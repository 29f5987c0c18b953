// Dialog state tracking on top of the encoder: every (slot, value) pair in
// the ontology is rendered as text, scored against the dialog context with
// the sigmoid relevance head, thresholded at 0.5, and folded into the
// running state. Requestable slots ride the same path under the pseudo-slot
// "request".
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dstd/encoder.hpp"
#include "dstd/error.hpp"
#include "dstd/optimizer.hpp"
#include "dstd/rng.hpp"
#include "dstd/tokenizer.hpp"

namespace dstd {

constexpr const char* kRequestSlot = "request";
constexpr double kDefaultThreshold = 0.5;

struct Ontology {
  std::map<std::string, std::vector<std::string>> informable;
  std::vector<std::string> requestable;
};

inline void validate_ontology(const Ontology& ont) {
  for (const auto& [slot, values] : ont.informable) {
    require(!values.empty(), Errc::empty_value_list, "informable slot '" + slot + "' has no values");
    require(slot != kRequestSlot, Errc::duplicate_slot,
            "'request' is reserved for requestable slots");
    std::set<std::string> seen(values.begin(), values.end());
    require(seen.size() == values.size(), Errc::empty_value_list,
            "duplicate values under slot '" + slot + "'");
  }
  std::set<std::string> seen(ont.requestable.begin(), ont.requestable.end());
  require(seen.size() == ont.requestable.size(), Errc::duplicate_slot,
          "duplicate requestable slot");
}

struct Candidate {
  std::string slot;
  std::string value;

  bool is_request() const { return slot == kRequestSlot; }
  std::string text() const { return slot + " = " + value; }
  auto operator<=>(const Candidate&) const = default;
};

struct DialogTurn {
  std::string system_utterance;  // empty on the first turn
  std::string user_utterance;
  std::vector<Candidate> gold_turn_label;
};

struct DialogState {
  std::map<std::string, std::string> goals;
  std::set<std::string> requests;

  bool operator==(const DialogState&) const = default;
};

struct Prediction {
  Candidate candidate;
  double probability = 0.0;
};

inline bool candidate_in_ontology(const Ontology& ont, const Candidate& c) {
  if (c.is_request())
    return std::find(ont.requestable.begin(), ont.requestable.end(), c.value) !=
           ont.requestable.end();
  auto it = ont.informable.find(c.slot);
  if (it == ont.informable.end()) return false;
  return std::find(it->second.begin(), it->second.end(), c.value) != it->second.end();
}

// All informable (slot, value) pairs plus one request candidate per
// requestable slot, sorted by (slot, value).
inline std::vector<Candidate> enumerate_candidates(const Ontology& ontology) {
  validate_ontology(ontology);
  std::vector<Candidate> out;
  for (const auto& [slot, values] : ontology.informable)
    for (const std::string& v : values) out.push_back({slot, v});
  for (const std::string& slot : ontology.requestable) out.push_back({kRequestSlot, slot});
  std::sort(out.begin(), out.end());
  return out;
}

// [CLS] system [SEP] user [SEP] candidate [SEP]: the two context utterances
// form segment A with an inner separator, the candidate text is segment B.
inline PackedInput build_scoring_input(const DialogTurn& turn, const Candidate& candidate,
                                       const Vocab& vocab, int max_len) {
  TokenSequence context = tokenize(turn.system_utterance, vocab);
  context.tokens.push_back(special_tokens()[kSepId]);
  context.ids.push_back(kSepId);
  TokenSequence user = tokenize(turn.user_utterance, vocab);
  context.tokens.insert(context.tokens.end(), user.tokens.begin(), user.tokens.end());
  context.ids.insert(context.ids.end(), user.ids.begin(), user.ids.end());
  return pack_pair(context, tokenize(candidate.text(), vocab), max_len);
}

template <typename T>
double scorer_logit(const ModelParamsT<T>& params, const Mat<T>& hidden) {
  double z = static_cast<double>(params.scorer_b[0]);
  const T* h1 = hidden.row(0);
  for (int j = 0; j < params.config.hidden; ++j)
    z += static_cast<double>(params.scorer_w[j]) * h1[j];
  return z;
}

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// Relevance probability of one candidate given the turn context.
template <typename T>
Prediction score_candidate(const ModelParamsT<T>& params, const DialogTurn& turn,
                           const Candidate& candidate, const Vocab& vocab, int max_len) {
  PackedInput input = build_scoring_input(turn, candidate, vocab, max_len);
  Mat<T> hidden = forward(params, input);
  return Prediction{candidate, sigmoid(scorer_logit(params, hidden))};
}

// Threshold + per-slot resolution: every prediction at or above the
// threshold survives, but an informable slot keeps only its best value
// (ties broken toward the lexicographically smaller one). Requests pass
// independently.
inline std::vector<Candidate> select_predictions(const std::vector<Prediction>& scored,
                                                 double threshold = kDefaultThreshold) {
  std::map<std::string, Prediction> best_per_slot;
  std::vector<Candidate> requests;
  for (const Prediction& p : scored) {
    if (p.probability < threshold) continue;
    if (p.candidate.is_request()) {
      requests.push_back(p.candidate);
      continue;
    }
    auto it = best_per_slot.find(p.candidate.slot);
    if (it == best_per_slot.end() || p.probability > it->second.probability ||
        (p.probability == it->second.probability && p.candidate.value < it->second.candidate.value))
      best_per_slot[p.candidate.slot] = p;
  }
  std::vector<Candidate> out;
  for (const auto& [slot, pred] : best_per_slot) out.push_back(pred.candidate);
  out.insert(out.end(), requests.begin(), requests.end());
  std::sort(out.begin(), out.end());
  return out;
}

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  int used = std::min(threads, n);
  for (int t = 0; t < used; ++t) {
    pool.emplace_back([&, t]() {
      for (int i = t; i < n; i += used) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

// Scores every ontology candidate for the turn and applies the selection
// rule. Candidates are independent, so scoring may fan out over threads
// with results identical to the sequential order.
template <typename T>
std::vector<Candidate> predict_turn(const ModelParamsT<T>& params, const DialogTurn& turn,
                                    const Ontology& ontology, const Vocab& vocab, int max_len,
                                    double threshold = kDefaultThreshold, int threads = 1) {
  std::vector<Candidate> candidates = enumerate_candidates(ontology);
  std::vector<Prediction> scored(candidates.size());
  parallel_for(static_cast<int>(candidates.size()), threads, [&](int i) {
    scored[i] = score_candidate(params, turn, candidates[i], vocab, max_len);
  });
  return select_predictions(scored, threshold);
}

// New informable pairs overwrite the previous goals; untouched slots carry
// over. Requests never carry over: the new request set is exactly what this
// turn predicted.
inline DialogState update_state(const DialogState& prev, const std::vector<Candidate>& predicted) {
  DialogState next;
  next.goals = prev.goals;
  std::set<std::string> seen_slots;
  for (const Candidate& c : predicted) {
    if (c.is_request()) {
      next.requests.insert(c.value);
      continue;
    }
    require(seen_slots.insert(c.slot).second, Errc::conflicting_values,
            "two values predicted for slot '" + c.slot + "'");
    next.goals[c.slot] = c.value;
  }
  return next;
}

template <typename T>
std::vector<DialogState> track_dialog(const ModelParamsT<T>& params,
                                      const std::vector<DialogTurn>& turns,
                                      const Ontology& ontology, const Vocab& vocab, int max_len,
                                      double threshold = kDefaultThreshold, int threads = 1) {
  std::vector<DialogState> states;
  DialogState state;
  for (const DialogTurn& turn : turns) {
    state = update_state(state, predict_turn(params, turn, ontology, vocab, max_len, threshold,
                                             threads));
    states.push_back(state);
  }
  return states;
}

// Fraction of turns whose full goals map matches gold exactly. Empty input
// counts as vacuously perfect.
inline double joint_goal_accuracy(const std::vector<DialogState>& predicted,
                                  const std::vector<DialogState>& gold) {
  require(predicted.size() == gold.size(), Errc::length_mismatch,
          "predicted and gold state lists differ in length");
  if (predicted.empty()) return 1.0;
  size_t hits = 0;
  for (size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i].goals == gold[i].goals) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

// Fraction of turns whose request set matches gold exactly.
inline double turn_request_accuracy(const std::vector<DialogState>& predicted,
                                    const std::vector<DialogState>& gold) {
  require(predicted.size() == gold.size(), Errc::length_mismatch,
          "predicted and gold state lists differ in length");
  if (predicted.empty()) return 1.0;
  size_t hits = 0;
  for (size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i].requests == gold[i].requests) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

// Binary cross-entropy of the relevance head over a batch, with gradients.
// Each example contributes weight / batch_size; pass grads = nullptr for
// loss-only evaluation.
template <typename T>
double scorer_bce_loss(const ModelParamsT<T>& params, std::span<const PackedInput> inputs,
                       std::span<const float> labels, GradientsT<T>* grads) {
  require(inputs.size() == labels.size(), Errc::length_mismatch,
          "inputs and labels differ in length");
  if (inputs.empty()) return 0.0;
  const double inv_batch = 1.0 / static_cast<double>(inputs.size());

  auto loss_fn = [&](size_t idx, const ForwardCache<T>& cache, Mat<T>& d_hidden,
                     GradientsT<T>& g) -> double {
    const Mat<T>& hidden = cache.final_hidden();
    double z = scorer_logit(params, hidden);
    double t = labels[idx];
    // Stable BCE on the logit: max(z,0) - z*t + log(1 + exp(-|z|)).
    double loss = std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    double dz = (sigmoid(z) - t) * inv_batch;
    d_hidden.zero();
    T* d1 = d_hidden.row(0);
    const T* h1 = hidden.row(0);
    for (int j = 0; j < params.config.hidden; ++j) {
      d1[j] = static_cast<T>(dz * params.scorer_w[j]);
      g.scorer_w[j] += static_cast<T>(dz * h1[j]);
    }
    g.scorer_b[0] += static_cast<T>(dz);
    return loss * inv_batch;
  };

  if (grads == nullptr) {
    double total = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
      Mat<T> hidden = forward(params, inputs[i]);
      double z = scorer_logit(params, hidden);
      double t = labels[i];
      total += (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)))) * inv_batch;
    }
    return total;
  }
  auto [loss, g] = compute_gradients(params, inputs, loss_fn);
  *grads = std::move(g);
  return loss;
}

struct DstTrainConfig {
  int epochs = 8;
  int batch_size = 32;
  double lr = 1e-3;
  int warmup_steps = 100;  // linear learning-rate ramp
  double clip_norm = 1.0;
  int negative_ratio = 0;  // negatives kept per positive; 0 keeps all
  int max_len = 48;
  uint64_t seed = 1;
};

struct DstTrainResult {
  ModelParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int64_t steps = 0;
};

struct LabeledExample {
  PackedInput input;
  float label = 0.0f;
};

// Flattens dialogs into (turn, candidate) -> {0,1} examples. With a
// positive negative_ratio, each turn keeps all its positives plus
// ratio * max(1, positives) sampled negatives.
inline std::vector<LabeledExample> build_dst_examples(
    const std::vector<std::vector<DialogTurn>>& dialogs, const Ontology& ontology,
    const Vocab& vocab, const DstTrainConfig& cfg) {
  std::vector<Candidate> candidates = enumerate_candidates(ontology);
  Rng rng(derive_seed(cfg.seed, 0xe9));
  std::vector<LabeledExample> out;
  for (const auto& dialog : dialogs) {
    for (const DialogTurn& turn : dialog) {
      std::set<Candidate> gold;
      for (const Candidate& c : turn.gold_turn_label) {
        require(candidate_in_ontology(ontology, c), Errc::label_not_in_ontology,
                "gold label " + c.text() + " not in ontology");
        gold.insert(c);
      }
      std::vector<const Candidate*> negatives;
      std::vector<const Candidate*> positives;
      for (const Candidate& c : candidates)
        (gold.count(c) ? positives : negatives).push_back(&c);
      std::vector<const Candidate*> kept(positives);
      if (cfg.negative_ratio > 0) {
        size_t want = static_cast<size_t>(cfg.negative_ratio) * std::max<size_t>(1, positives.size());
        rng.shuffle(negatives);
        if (negatives.size() > want) negatives.resize(want);
      }
      kept.insert(kept.end(), negatives.begin(), negatives.end());
      for (const Candidate* c : kept)
        out.push_back({build_scoring_input(turn, *c, vocab, cfg.max_len),
                       gold.count(*c) ? 1.0f : 0.0f});
    }
  }
  return out;
}

// Minimizes BCE between the relevance score and turn-label membership.
inline DstTrainResult train_dst(ModelParams params,
                                const std::vector<std::vector<DialogTurn>>& dialogs,
                                const Ontology& ontology, const Vocab& vocab,
                                const DstTrainConfig& cfg) {
  std::vector<LabeledExample> examples = build_dst_examples(dialogs, ontology, vocab, cfg);
  require(!examples.empty(), Errc::empty_corpus, "no training examples");

  DstTrainResult result;
  AdamState adam = init_adam_state(params);
  OptimizerHyper hyper;
  hyper.clip_norm = cfg.clip_norm;

  Rng shuffle_rng(derive_seed(cfg.seed, 0x5f));
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<PackedInput> batch_inputs;
  std::vector<float> batch_labels;
  bool first_batch = true;
  double last_epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t epoch_batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      size_t stop = std::min(order.size(), start + cfg.batch_size);
      batch_inputs.clear();
      batch_labels.clear();
      for (size_t i = start; i < stop; ++i) {
        batch_inputs.push_back(examples[order[i]].input);
        batch_labels.push_back(examples[order[i]].label);
      }
      Gradients grads = zeros_like(params);
      double loss = scorer_bce_loss<float>(params, batch_inputs, batch_labels, &grads);
      if (first_batch) {
        result.initial_loss = loss;
        first_batch = false;
      }
      hyper.lr = cfg.warmup_steps > 0
                     ? cfg.lr * std::min(1.0, double(result.steps + 1) / cfg.warmup_steps)
                     : cfg.lr;
      optimizer_step(params, grads, adam, hyper);
      epoch_loss += loss;
      ++epoch_batches;
      ++result.steps;
    }
    last_epoch_loss = epoch_loss / std::max<int64_t>(1, epoch_batches);
  }
  result.final_loss = last_epoch_loss;
  result.params = std::move(params);
  return result;
}

}  // namespace dstd
