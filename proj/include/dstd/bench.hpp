// Per-turn inference latency measurement: each measured turn scores every
// ontology candidate, applies the selection rule and folds the state, i.e.
// exactly the work a deployed tracker does per user turn.
#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <string>
#include <vector>

#include "dstd/data_io.hpp"
#include "dstd/dst.hpp"
#include "dstd/error.hpp"

namespace dstd {

struct BenchReport {
  std::string model_id;
  std::string hardware;
  double mean_seconds = 0.0;
  double median_seconds = 0.0;
  double p95_seconds = 0.0;
  int turns_measured = 0;
  int warmup_turns = 0;
  int threads = 1;
  int candidates_per_turn = 0;
};

inline std::string cpu_description() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      size_t colon = line.find(':');
      if (colon != std::string::npos && colon + 2 <= line.size()) {
        std::string name = line.substr(colon + 1);
        size_t start = name.find_first_not_of(' ');
        return start == std::string::npos ? "unknown cpu" : name.substr(start);
      }
    }
  }
  return "unknown cpu";
}

constexpr int kMinBenchTurns = 30;

// Cycles through the provided turns until warmup + measured turns have run.
template <typename T>
BenchReport run_bench(const ModelParamsT<T>& params, const Vocab& vocab,
                      const Ontology& ontology, const std::vector<LabeledDialog>& dialogs,
                      int turns, int warmup, int threads, int max_len,
                      const std::string& model_id) {
  require(turns >= kMinBenchTurns, Errc::too_few_turns,
          "need at least " + std::to_string(kMinBenchTurns) + " measured turns, got " +
              std::to_string(turns));
  std::vector<const DialogTurn*> stream;
  for (const LabeledDialog& d : dialogs)
    for (const DialogTurn& t : d.turns) stream.push_back(&t);
  require(!stream.empty(), Errc::too_few_turns, "dialog file has no turns");

  BenchReport report;
  report.model_id = model_id;
  report.hardware = cpu_description();
  report.threads = threads;
  report.warmup_turns = warmup;
  report.candidates_per_turn = static_cast<int>(enumerate_candidates(ontology).size());

  std::vector<double> samples;
  samples.reserve(turns);
  DialogState state;
  size_t cursor = 0;
  for (int i = 0; i < warmup + turns; ++i) {
    const DialogTurn& turn = *stream[cursor];
    cursor = (cursor + 1) % stream.size();
    auto t0 = std::chrono::steady_clock::now();
    std::vector<Candidate> predicted =
        predict_turn(params, turn, ontology, vocab, max_len, kDefaultThreshold, threads);
    state = update_state(state, predicted);
    auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup)
      samples.push_back(std::chrono::duration<double>(t1 - t0).count());
  }

  std::sort(samples.begin(), samples.end());
  double sum = 0.0;
  for (double s : samples) sum += s;
  report.turns_measured = static_cast<int>(samples.size());
  report.mean_seconds = sum / samples.size();
  report.median_seconds = samples[samples.size() / 2];
  size_t p95_idx = std::min(samples.size() - 1,
                            static_cast<size_t>(std::ceil(0.95 * samples.size())) - 1);
  report.p95_seconds = samples[p95_idx];
  return report;
}

inline json bench_report_json(const BenchReport& r) {
  return json{{"model", r.model_id},
              {"hardware", r.hardware},
              {"threads", r.threads},
              {"warmup_turns", r.warmup_turns},
              {"turns_measured", r.turns_measured},
              {"candidates_per_turn", r.candidates_per_turn},
              {"mean_seconds", r.mean_seconds},
              {"median_seconds", r.median_seconds},
              {"p95_seconds", r.p95_seconds}};
}

}  // namespace dstd
