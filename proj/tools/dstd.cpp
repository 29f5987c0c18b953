// dstd command-line tool: corpus/domain generation, vocabulary building,
// masked-LM pretraining, knowledge distillation, DST fine-tuning,
// evaluation, tracking, size reporting and latency benchmarking.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dstd/bench.hpp"
#include "dstd/data_io.hpp"
#include "dstd/distill.hpp"
#include "dstd/dst.hpp"
#include "dstd/encoder.hpp"
#include "dstd/error.hpp"
#include "dstd/synthetic.hpp"
#include "dstd/tokenizer.hpp"

namespace {

using dstd::json;

uint64_t default_seed() {
  if (const char* env = std::getenv("DSTD_SEED")) return std::strtoull(env, nullptr, 10);
  return 1;
}

struct ConfigFlags {
  int layers = 2;
  int hidden = 64;
  int ffn = 256;
  int heads = 2;
  int max_positions = 128;
  float dropout = 0.0f;

  void attach(CLI::App* cmd) {
    cmd->add_option("--layers", layers, "Transformer layer count");
    cmd->add_option("--hidden", hidden, "Hidden size");
    cmd->add_option("--ffn", ffn, "Feedforward size");
    cmd->add_option("--heads", heads, "Attention head count");
    cmd->add_option("--max-positions", max_positions, "Maximum sequence positions");
    cmd->add_option("--dropout", dropout, "Dropout rate during training");
  }

  dstd::EncoderConfig to_config(int vocab_size) const {
    dstd::EncoderConfig c;
    c.layers = layers;
    c.hidden = hidden;
    c.ffn = ffn;
    c.heads = heads;
    c.vocab_size = vocab_size;
    c.max_positions = max_positions;
    c.dropout_rate = dropout;
    dstd::validate_config(c);
    return c;
  }
};

void write_corpus_file(const std::vector<std::string>& lines, const std::string& path) {
  std::string text;
  for (const std::string& line : lines) {
    text += line;
    text += '\n';
  }
  dstd::write_text_file(path, text);
}

json config_json(const dstd::EncoderConfig& c) {
  return json{{"layers", c.layers},         {"hidden", c.hidden},
              {"ffn", c.ffn},               {"heads", c.heads},
              {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
              {"dropout_rate", c.dropout_rate}};
}

json size_report_json(const dstd::EncoderConfig& config) {
  int64_t body = dstd::count_params(config);
  int64_t heads = dstd::count_head_params(config);
  return json{{"config", config_json(config)},
              {"body_params", body},
              {"head_params", heads},
              {"total_params", body + heads},
              {"body_bytes_fp32", body * 4},
              {"total_bytes_fp32", (body + heads) * 4}};
}

json metrics_report(const std::vector<dstd::LabeledDialog>& dialogs,
                    const std::vector<std::vector<dstd::DialogState>>& predicted) {
  std::vector<dstd::DialogState> flat_pred, flat_gold;
  json per_dialog = json::array();
  for (size_t d = 0; d < dialogs.size(); ++d) {
    flat_pred.insert(flat_pred.end(), predicted[d].begin(), predicted[d].end());
    flat_gold.insert(flat_gold.end(), dialogs[d].gold_states.begin(),
                     dialogs[d].gold_states.end());
    per_dialog.push_back(
        {{"dialog", d},
         {"turns", dialogs[d].turns.size()},
         {"joint_goal", dstd::joint_goal_accuracy(predicted[d], dialogs[d].gold_states)},
         {"turn_request", dstd::turn_request_accuracy(predicted[d], dialogs[d].gold_states)}});
  }
  return json{{"joint_goal_accuracy", dstd::joint_goal_accuracy(flat_pred, flat_gold)},
              {"turn_request_accuracy", dstd::turn_request_accuracy(flat_pred, flat_gold)},
              {"dialogs", dialogs.size()},
              {"turns", flat_gold.size()},
              {"per_dialog", per_dialog}};
}

json states_json(const std::vector<dstd::DialogState>& states) {
  json out = json::array();
  for (const dstd::DialogState& s : states) {
    json goals = json::object();
    for (const auto& [slot, value] : s.goals) goals[slot] = value;
    out.push_back({{"goals", goals},
                   {"requests", std::vector<std::string>(s.requests.begin(), s.requests.end())}});
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Dialog state tracking with a compact encoder and distillation"};
  app.require_subcommand(1);

  // --- gen-corpus ---------------------------------------------------------
  auto* gen_corpus = app.add_subcommand("gen-corpus", "Generate the synthetic sentence corpus");
  uint64_t gc_seed = default_seed();
  int gc_count = 10000;
  std::string gc_out;
  gen_corpus->add_option("--seed", gc_seed, "Generator seed");
  gen_corpus->add_option("--count", gc_count, "Sentence count")->required();
  gen_corpus->add_option("--out", gc_out, "Output corpus file")->required();

  // --- gen-domain ---------------------------------------------------------
  auto* gen_domain = app.add_subcommand("gen-domain", "Generate the synthetic dialog domain");
  uint64_t gd_seed = 7;
  int gd_train = 300, gd_dev = 50, gd_test = 50, gd_min_turns = 2, gd_max_turns = 5;
  std::string gd_out_dir;
  gen_domain->add_option("--seed", gd_seed, "Generator seed");
  gen_domain->add_option("--train", gd_train, "Training dialog count");
  gen_domain->add_option("--dev", gd_dev, "Dev dialog count");
  gen_domain->add_option("--test", gd_test, "Test dialog count");
  gen_domain->add_option("--min-turns", gd_min_turns, "Minimum turns per dialog");
  gen_domain->add_option("--max-turns", gd_max_turns, "Maximum turns per dialog");
  gen_domain->add_option("--out-dir", gd_out_dir, "Output directory")->required();

  // --- build-vocab --------------------------------------------------------
  auto* build_vocab = app.add_subcommand("build-vocab", "Build a subword vocabulary");
  std::string bv_corpus, bv_out;
  int bv_size = 500;
  build_vocab->add_option("--corpus", bv_corpus, "Corpus file, one sentence per line")
      ->required();
  build_vocab->add_option("--size", bv_size, "Target vocabulary size")->required();
  build_vocab->add_option("--out", bv_out, "Output vocab file")->required();

  // --- pretrain -----------------------------------------------------------
  auto* pretrain = app.add_subcommand("pretrain", "Masked-LM pretraining from scratch");
  ConfigFlags pt_cfg;
  pt_cfg.layers = 4;
  pt_cfg.hidden = 128;
  pt_cfg.ffn = 512;
  pt_cfg.heads = 4;
  pt_cfg.attach(pretrain);
  std::string pt_vocab, pt_corpus, pt_out, pt_manifest;
  dstd::PretrainConfig pt;
  pt.seed = default_seed();
  pretrain->add_option("--vocab", pt_vocab)->required();
  pretrain->add_option("--corpus", pt_corpus)->required();
  pretrain->add_option("--out", pt_out, "Output checkpoint")->required();
  pretrain->add_option("--manifest", pt_manifest, "Manifest path (default <out>.manifest.json)");
  pretrain->add_option("--steps", pt.steps);
  pretrain->add_option("--warmup", pt.warmup_steps, "Linear lr warmup steps");
  pretrain->add_option("--batch", pt.batch_size);
  pretrain->add_option("--lr", pt.opt.lr);
  pretrain->add_option("--mask-rate", pt.mask_rate);
  pretrain->add_option("--max-len", pt.max_len);
  pretrain->add_option("--seed", pt.seed);

  // --- distill ------------------------------------------------------------
  auto* distill_cmd = app.add_subcommand("distill", "Distill a teacher into a small student");
  ConfigFlags ds_cfg;  // student architecture
  ds_cfg.attach(distill_cmd);
  std::string ds_teacher, ds_corpus, ds_out, ds_manifest, ds_positions = "all";
  dstd::DistillConfig ds;
  ds.seed = default_seed();
  distill_cmd->add_option("--teacher", ds_teacher, "Teacher checkpoint")->required();
  distill_cmd->add_option("--corpus", ds_corpus)->required();
  distill_cmd->add_option("--out", ds_out, "Output student checkpoint")->required();
  distill_cmd->add_option("--manifest", ds_manifest);
  distill_cmd->add_option("--tau", ds.temperature, "Softening temperature");
  distill_cmd->add_option("--mask-rate", ds.mask_rate);
  distill_cmd->add_option("--loss-positions", ds_positions, "'all' or 'masked'");
  distill_cmd->add_option("--steps", ds.steps);
  distill_cmd->add_option("--warmup", ds.warmup_steps, "Linear lr warmup steps");
  distill_cmd->add_option("--batch", ds.batch_size);
  distill_cmd->add_option("--lr", ds.opt.lr);
  distill_cmd->add_option("--max-len", ds.max_len);
  distill_cmd->add_option("--seed", ds.seed);

  // --- train --------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Fine-tune the relevance scorer on dialogs");
  ConfigFlags tr_cfg;
  tr_cfg.attach(train);
  std::string tr_vocab, tr_dialogs, tr_ontology, tr_out, tr_init, tr_manifest;
  dstd::DstTrainConfig tr;
  tr.seed = default_seed();
  train->add_option("--vocab", tr_vocab, "Vocab file (required unless --init)");
  train->add_option("--init", tr_init, "Checkpoint to start from");
  train->add_option("--dialogs", tr_dialogs)->required();
  train->add_option("--ontology", tr_ontology)->required();
  train->add_option("--out", tr_out, "Output checkpoint")->required();
  train->add_option("--manifest", tr_manifest);
  train->add_option("--epochs", tr.epochs);
  train->add_option("--warmup", tr.warmup_steps, "Linear lr warmup steps");
  train->add_option("--batch", tr.batch_size);
  train->add_option("--lr", tr.lr);
  train->add_option("--clip", tr.clip_norm);
  train->add_option("--neg-ratio", tr.negative_ratio, "Negatives per positive (0 = all)");
  train->add_option("--max-len", tr.max_len);
  train->add_option("--seed", tr.seed);

  // --- evaluate -----------------------------------------------------------
  auto* evaluate = app.add_subcommand("evaluate", "Joint goal / turn request accuracy");
  std::string ev_ckpt, ev_dialogs, ev_ontology, ev_out;
  double ev_threshold = dstd::kDefaultThreshold;
  int ev_max_len = 48, ev_threads = 1;
  evaluate->add_option("--checkpoint", ev_ckpt)->required();
  evaluate->add_option("--dialogs", ev_dialogs)->required();
  evaluate->add_option("--ontology", ev_ontology)->required();
  evaluate->add_option("--out", ev_out, "Report path (default stdout)");
  evaluate->add_option("--threshold", ev_threshold);
  evaluate->add_option("--max-len", ev_max_len);
  evaluate->add_option("--threads", ev_threads);

  // --- track --------------------------------------------------------------
  auto* track = app.add_subcommand("track", "Write predicted per-turn states");
  std::string tk_ckpt, tk_dialogs, tk_ontology, tk_out;
  double tk_threshold = dstd::kDefaultThreshold;
  int tk_max_len = 48, tk_threads = 1;
  track->add_option("--checkpoint", tk_ckpt)->required();
  track->add_option("--dialogs", tk_dialogs)->required();
  track->add_option("--ontology", tk_ontology)->required();
  track->add_option("--out", tk_out)->required();
  track->add_option("--threshold", tk_threshold);
  track->add_option("--max-len", tk_max_len);
  track->add_option("--threads", tk_threads);

  // --- size-report --------------------------------------------------------
  auto* size_report = app.add_subcommand("size-report", "Parameter and storage accounting");
  ConfigFlags sr_cfg;
  sr_cfg.attach(size_report);
  std::string sr_ckpt, sr_out;
  int sr_vocab_size = 0;
  size_report->add_option("--checkpoint", sr_ckpt, "Read the config from a checkpoint");
  size_report->add_option("--vocab-size", sr_vocab_size, "Vocab size when using config flags");
  size_report->add_option("--out", sr_out, "Report path (default stdout)");

  // --- bench --------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "Per-turn CPU inference latency");
  std::string bn_ckpt, bn_dialogs, bn_ontology, bn_out;
  int bn_turns = 50, bn_warmup = 5, bn_threads = 1, bn_max_len = 48;
  bench->add_option("--checkpoint", bn_ckpt)->required();
  bench->add_option("--ontology", bn_ontology)->required();
  bench->add_option("--dialogs", bn_dialogs)->required();
  bench->add_option("--turns", bn_turns, "Measured turns (>= 30)");
  bench->add_option("--warmup", bn_warmup, "Discarded warmup turns");
  bench->add_option("--threads", bn_threads, "Scoring threads");
  bench->add_option("--max-len", bn_max_len);
  bench->add_option("--out", bn_out, "Report path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto emit = [](const json& j, const std::string& path) {
    if (path.empty())
      std::cout << j.dump(2) << "\n";
    else
      dstd::write_text_file(path, j.dump(2) + "\n");
  };

  if (gen_corpus->parsed()) {
    write_corpus_file(dstd::generate_synthetic_corpus(gc_seed, gc_count), gc_out);
    std::cout << "wrote " << gc_count << " sentences to " << gc_out << "\n";
    return 0;
  }

  if (gen_domain->parsed()) {
    dstd::SyntheticDomainSpec spec = dstd::default_domain_spec();
    spec.seed = gd_seed;
    spec.train_dialogs = gd_train;
    spec.dev_dialogs = gd_dev;
    spec.test_dialogs = gd_test;
    spec.min_turns = gd_min_turns;
    spec.max_turns = gd_max_turns;
    dstd::SyntheticDomain domain = dstd::generate_synthetic_domain(spec);
    std::filesystem::create_directories(gd_out_dir);
    dstd::save_ontology(domain.ontology, gd_out_dir + "/ontology.json");
    dstd::save_dialogs(domain.train, gd_out_dir + "/train.json");
    dstd::save_dialogs(domain.dev, gd_out_dir + "/dev.json");
    dstd::save_dialogs(domain.test, gd_out_dir + "/test.json");
    write_corpus_file(dstd::domain_training_corpus(domain), gd_out_dir + "/corpus.txt");
    std::cout << "wrote domain (" << gd_train << "/" << gd_dev << "/" << gd_test
              << " dialogs) to " << gd_out_dir << "\n";
    return 0;
  }

  if (build_vocab->parsed()) {
    dstd::Vocab vocab = dstd::build_vocab(dstd::load_corpus(bv_corpus), bv_size);
    dstd::save_vocab(vocab, bv_out);
    std::cout << "wrote vocab of " << vocab.size() << " tokens to " << bv_out << "\n";
    return 0;
  }

  if (pretrain->parsed()) {
    dstd::Vocab vocab = dstd::load_vocab(pt_vocab);
    dstd::EncoderConfig config = pt_cfg.to_config(vocab.size());
    dstd::require(pt.max_len <= config.max_positions, dstd::Errc::invalid_config,
                  "--max-len exceeds --max-positions");
    dstd::PretrainResult result =
        dstd::pretrain_teacher(config, dstd::load_corpus(pt_corpus), vocab, pt);
    dstd::save_checkpoint(result.params, vocab, pt_out);
    json manifest{{"command", "pretrain"},
                  {"config", config_json(config)},
                  {"steps", result.steps},
                  {"batch_size", pt.batch_size},
                  {"lr", pt.opt.lr},
                  {"mask_rate", pt.mask_rate},
                  {"max_len", pt.max_len},
                  {"seed", pt.seed},
                  {"final_train_loss", result.final_train_loss},
                  {"holdout_masked_accuracy", result.holdout_accuracy},
                  {"holdout_masked_tokens", result.holdout_masked_tokens}};
    emit(manifest, pt_manifest.empty() ? pt_out + ".manifest.json" : pt_manifest);
    std::cout << "pretrained " << pt_out << " holdout_masked_accuracy="
              << result.holdout_accuracy << "\n";
    return 0;
  }

  if (distill_cmd->parsed()) {
    dstd::LoadedCheckpoint teacher = dstd::load_checkpoint(ds_teacher);
    dstd::EncoderConfig student_config = ds_cfg.to_config(teacher.vocab.size());
    dstd::require(ds.max_len <= student_config.max_positions, dstd::Errc::invalid_config,
                  "--max-len exceeds --max-positions");
    if (ds_positions == "all")
      ds.loss_positions = dstd::LossPositions::all_tokens;
    else if (ds_positions == "masked")
      ds.loss_positions = dstd::LossPositions::masked_only;
    else
      dstd::fail(dstd::Errc::invalid_config, "--loss-positions must be 'all' or 'masked'");
    dstd::DistillResult result = dstd::distill(teacher.params, student_config,
                                               dstd::load_corpus(ds_corpus), teacher.vocab, ds);
    dstd::save_checkpoint(result.student, teacher.vocab, ds_out);
    json manifest{{"command", "distill"},
                  {"teacher", ds_teacher},
                  {"student_config", config_json(student_config)},
                  {"temperature", ds.temperature},
                  {"mask_rate", ds.mask_rate},
                  {"loss_positions", ds_positions},
                  {"steps", result.steps},
                  {"batch_size", ds.batch_size},
                  {"lr", ds.opt.lr},
                  {"max_len", ds.max_len},
                  {"seed", ds.seed},
                  {"holdout_loss_initial", result.holdout_loss_initial},
                  {"holdout_loss_final", result.holdout_loss_final},
                  {"student_holdout_accuracy", result.student_holdout_accuracy},
                  {"teacher_holdout_accuracy", result.teacher_holdout_accuracy}};
    emit(manifest, ds_manifest.empty() ? ds_out + ".manifest.json" : ds_manifest);
    std::cout << "distilled " << ds_out
              << " student_acc=" << result.student_holdout_accuracy
              << " teacher_acc=" << result.teacher_holdout_accuracy << "\n";
    return 0;
  }

  if (train->parsed()) {
    dstd::ModelParams params;
    dstd::Vocab vocab;
    if (!tr_init.empty()) {
      dstd::LoadedCheckpoint loaded = dstd::load_checkpoint(tr_init);
      params = std::move(loaded.params);
      vocab = std::move(loaded.vocab);
    } else {
      dstd::require(!tr_vocab.empty(), dstd::Errc::invalid_config,
                    "either --init or --vocab is required");
      vocab = dstd::load_vocab(tr_vocab);
      params = dstd::init_params(tr_cfg.to_config(vocab.size()), dstd::derive_seed(tr.seed, 0xA));
    }
    dstd::require(tr.max_len <= params.config.max_positions, dstd::Errc::invalid_config,
                  "--max-len exceeds the model's max positions");
    dstd::Ontology ontology = dstd::load_ontology(tr_ontology);
    std::vector<dstd::LabeledDialog> dialogs = dstd::load_dialogs(tr_dialogs, ontology);
    std::vector<std::vector<dstd::DialogTurn>> turn_lists;
    turn_lists.reserve(dialogs.size());
    for (const dstd::LabeledDialog& d : dialogs) turn_lists.push_back(d.turns);
    dstd::DstTrainResult result =
        dstd::train_dst(std::move(params), turn_lists, ontology, vocab, tr);
    dstd::save_checkpoint(result.params, vocab, tr_out);
    json manifest{{"command", "train"},
                  {"config", config_json(result.params.config)},
                  {"epochs", tr.epochs},
                  {"batch_size", tr.batch_size},
                  {"lr", tr.lr},
                  {"clip_norm", tr.clip_norm},
                  {"negative_ratio", tr.negative_ratio},
                  {"max_len", tr.max_len},
                  {"seed", tr.seed},
                  {"steps", result.steps},
                  {"initial_loss", result.initial_loss},
                  {"final_loss", result.final_loss}};
    emit(manifest, tr_manifest.empty() ? tr_out + ".manifest.json" : tr_manifest);
    std::cout << "trained " << tr_out << " loss " << result.initial_loss << " -> "
              << result.final_loss << "\n";
    return 0;
  }

  if (evaluate->parsed()) {
    dstd::LoadedCheckpoint loaded = dstd::load_checkpoint(ev_ckpt);
    dstd::Ontology ontology = dstd::load_ontology(ev_ontology);
    std::vector<dstd::LabeledDialog> dialogs = dstd::load_dialogs(ev_dialogs, ontology);
    std::vector<std::vector<dstd::DialogState>> predicted;
    predicted.reserve(dialogs.size());
    for (const dstd::LabeledDialog& d : dialogs)
      predicted.push_back(dstd::track_dialog(loaded.params, d.turns, ontology, loaded.vocab,
                                             ev_max_len, ev_threshold, ev_threads));
    emit(metrics_report(dialogs, predicted), ev_out);
    return 0;
  }

  if (track->parsed()) {
    dstd::LoadedCheckpoint loaded = dstd::load_checkpoint(tk_ckpt);
    dstd::Ontology ontology = dstd::load_ontology(tk_ontology);
    std::vector<dstd::LabeledDialog> dialogs = dstd::load_dialogs(tk_dialogs, ontology);
    json out;
    out["dialogs"] = json::array();
    for (const dstd::LabeledDialog& d : dialogs)
      out["dialogs"].push_back(
          {{"turns", states_json(dstd::track_dialog(loaded.params, d.turns, ontology,
                                                    loaded.vocab, tk_max_len, tk_threshold,
                                                    tk_threads))}});
    emit(out, tk_out);
    return 0;
  }

  if (size_report->parsed()) {
    dstd::EncoderConfig config;
    if (!sr_ckpt.empty()) {
      config = dstd::load_checkpoint(sr_ckpt).params.config;
    } else {
      dstd::require(sr_vocab_size > 0, dstd::Errc::invalid_config,
                    "--vocab-size (or --checkpoint) is required");
      config = sr_cfg.to_config(sr_vocab_size);
    }
    emit(size_report_json(config), sr_out);
    return 0;
  }

  if (bench->parsed()) {
    dstd::LoadedCheckpoint loaded = dstd::load_checkpoint(bn_ckpt);
    dstd::Ontology ontology = dstd::load_ontology(bn_ontology);
    std::vector<dstd::LabeledDialog> dialogs = dstd::load_dialogs(bn_dialogs, ontology);
    dstd::BenchReport report = dstd::run_bench(loaded.params, loaded.vocab, ontology, dialogs,
                                               bn_turns, bn_warmup, bn_threads, bn_max_len,
                                               bn_ckpt);
    emit(dstd::bench_report_json(report), bn_out);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dstd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return dstd::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
