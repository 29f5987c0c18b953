#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dstd/data_io.hpp"
#include "dstd/rng.hpp"
#include "dstd/synthetic.hpp"
#include "dstd/tokenizer.hpp"

using namespace dstd;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("dstd_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

Errc thrown_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::io_error;
}

}  // namespace

TEST_CASE("load_ontology minimal and woz-shaped fixture") {
  TempDir tmp;
  write_text_file(tmp.file("ont.json"),
                  R"({"informable":{"food":["chinese"]},"requestable":["phone"]})");
  Ontology ont = load_ontology(tmp.file("ont.json"));
  CHECK(ont.informable.size() == 1);
  CHECK(ont.informable.at("food") == std::vector<std::string>{"chinese"});
  CHECK(ont.requestable == std::vector<std::string>{"phone"});

  Ontology woz = load_ontology(std::string(DSTD_FIXTURE_DIR) + "/woz_ontology.json");
  CHECK(woz.informable.size() == 3);
  CHECK(woz.requestable.size() == 8);
  CHECK(woz.informable.at("food").size() == 74);
  CHECK(enumerate_candidates(woz).size() == 74 + 3 + 5 + 8);
}

TEST_CASE("load_ontology error paths") {
  TempDir tmp;

  write_text_file(tmp.file("dup.json"),
                  R"({"informable":{"food":["a"],"food":["b"]},"requestable":[]})");
  CHECK(thrown_code([&] { load_ontology(tmp.file("dup.json")); }) == Errc::duplicate_slot);

  write_text_file(tmp.file("empty.json"), R"({"informable":{"food":[]},"requestable":[]})");
  CHECK(thrown_code([&] { load_ontology(tmp.file("empty.json")); }) == Errc::empty_value_list);

  write_text_file(tmp.file("dupval.json"),
                  R"({"informable":{"food":["a","a"]},"requestable":[]})");
  CHECK(thrown_code([&] { load_ontology(tmp.file("dupval.json")); }) == Errc::empty_value_list);

  write_text_file(tmp.file("missing.json"), R"({"informable":{}})");
  CHECK(thrown_code([&] { load_ontology(tmp.file("missing.json")); }) == Errc::missing_field);

  write_text_file(tmp.file("broken.json"), "{not json");
  CHECK(thrown_code([&] { load_ontology(tmp.file("broken.json")); }) == Errc::parse_error);

  CHECK(thrown_code([&] { load_ontology(tmp.file("absent.json")); }) == Errc::io_error);
}

TEST_CASE("load_dialogs basics and validation") {
  TempDir tmp;
  write_text_file(tmp.file("ont.json"),
                  R"({"informable":{"food":["chinese"]},"requestable":["phone"]})");
  Ontology ont = load_ontology(tmp.file("ont.json"));

  write_text_file(tmp.file("d.json"), R"({"dialogs":[{"turns":[
    {"system":"","user":"i want chinese food",
     "turn_label":[["food","chinese"]],
     "gold_state":{"goals":{"food":"chinese"},"requests":[]}}]}]})");
  std::vector<LabeledDialog> dialogs = load_dialogs(tmp.file("d.json"), ont);
  REQUIRE(dialogs.size() == 1);
  REQUIRE(dialogs[0].turns.size() == 1);
  CHECK(dialogs[0].turns[0].gold_turn_label.size() == 1);
  CHECK(dialogs[0].gold_states[0].goals.at("food") == "chinese");

  write_text_file(tmp.file("bad_label.json"), R"({"dialogs":[{"turns":[
    {"system":"","user":"x","turn_label":[["food","sushi"]],
     "gold_state":{"goals":{},"requests":[]}}]}]})");
  CHECK(thrown_code([&] { load_dialogs(tmp.file("bad_label.json"), ont); }) ==
        Errc::label_not_in_ontology);

  write_text_file(tmp.file("no_user.json"), R"({"dialogs":[{"turns":[
    {"system":"","turn_label":[],"gold_state":{"goals":{},"requests":[]}}]}]})");
  CHECK(thrown_code([&] { load_dialogs(tmp.file("no_user.json"), ont); }) == Errc::missing_field);

  write_text_file(tmp.file("bad_type.json"), R"({"dialogs":[{"turns":[
    {"system":7,"user":"x","turn_label":[],"gold_state":{"goals":{},"requests":[]}}]}]})");
  CHECK(thrown_code([&] { load_dialogs(tmp.file("bad_type.json"), ont); }) == Errc::parse_error);
}

TEST_CASE("dialog save/load round trip preserves content") {
  SyntheticDomainSpec spec = default_domain_spec();
  spec.train_dialogs = 12;
  spec.dev_dialogs = 0;
  spec.test_dialogs = 0;
  spec.seed = 3;
  SyntheticDomain domain = generate_synthetic_domain(spec);

  TempDir tmp;
  save_dialogs(domain.train, tmp.file("train.json"));
  std::vector<LabeledDialog> loaded = load_dialogs(tmp.file("train.json"), domain.ontology);
  REQUIRE(loaded.size() == domain.train.size());
  for (size_t d = 0; d < loaded.size(); ++d) {
    REQUIRE(loaded[d].turns.size() == domain.train[d].turns.size());
    for (size_t t = 0; t < loaded[d].turns.size(); ++t) {
      CHECK(loaded[d].turns[t].user_utterance == domain.train[d].turns[t].user_utterance);
      CHECK(loaded[d].turns[t].system_utterance == domain.train[d].turns[t].system_utterance);
      CHECK(loaded[d].turns[t].gold_turn_label == domain.train[d].turns[t].gold_turn_label);
      CHECK(loaded[d].gold_states[t] == domain.train[d].gold_states[t]);
    }
  }
}

TEST_CASE("train/dev/test split counts match the requested sizes") {
  SyntheticDomainSpec spec = default_domain_spec();
  spec.train_dialogs = 600;
  spec.dev_dialogs = 200;
  spec.test_dialogs = 400;
  spec.seed = 1;
  SyntheticDomain domain = generate_synthetic_domain(spec);
  TempDir tmp;
  save_dialogs(domain.train, tmp.file("train.json"));
  save_dialogs(domain.dev, tmp.file("dev.json"));
  save_dialogs(domain.test, tmp.file("test.json"));
  CHECK(load_dialogs(tmp.file("train.json"), domain.ontology).size() == 600);
  CHECK(load_dialogs(tmp.file("dev.json"), domain.ontology).size() == 200);
  CHECK(load_dialogs(tmp.file("test.json"), domain.ontology).size() == 400);
}

TEST_CASE("checkpoint round trip is bitwise identical") {
  std::vector<std::string> corpus = generate_synthetic_corpus(2, 60);
  Vocab vocab = build_vocab(corpus, 150);
  EncoderConfig cfg{2, 16, 32, 2, vocab.size(), 24, 0.1f};
  ModelParams params = init_params(cfg, 77);

  TempDir tmp;
  save_checkpoint(params, vocab, tmp.file("model.ckpt"));
  LoadedCheckpoint loaded = load_checkpoint(tmp.file("model.ckpt"));

  CHECK(loaded.vocab.id_to_token == vocab.id_to_token);
  CHECK(loaded.params.config.layers == cfg.layers);
  CHECK(loaded.params.config.dropout_rate == cfg.dropout_rate);
  bool identical = true;
  visit_tensors(params, [&](const char* name, float* d, size_t n, bool) {
    float* other = nullptr;
    visit_tensors(loaded.params, [&](const char* name2, float* d2, size_t n2, bool) {
      if (std::string(name) == name2 && n == n2) other = d2;
    });
    REQUIRE(other != nullptr);
    for (size_t i = 0; i < n; ++i)
      if (std::memcmp(&d[i], &other[i], 4) != 0) identical = false;
  });
  CHECK(identical);

  // file size is exactly header + vocab block + payload + crc
  uint64_t total = 0;
  visit_tensors(params, [&](const char*, float*, size_t n, bool) { total += n; });
  size_t vocab_bytes = 0;
  for (const std::string& t : vocab.id_to_token) vocab_bytes += 4 + t.size();
  size_t expected = 4 + 4 + 6 * 4 + 4 + 4 + vocab_bytes + 8 + total * 4 + 4;
  CHECK(std::filesystem::file_size(tmp.file("model.ckpt")) == expected);
}

TEST_CASE("checkpoint corruption and version checks") {
  std::vector<std::string> corpus = {"aa bb cc dd"};
  Vocab vocab = build_vocab(corpus, 40);
  EncoderConfig cfg{1, 8, 16, 2, vocab.size(), 16, 0.0f};
  ModelParams params = init_params(cfg, 5);

  TempDir tmp;
  std::string path = tmp.file("m.ckpt");
  save_checkpoint(params, vocab, path);

  std::string bytes = read_text_file(path);

  // flip one payload byte (100 bytes before the trailing crc)
  std::string corrupt = bytes;
  corrupt[corrupt.size() - 104] ^= 0x01;
  write_text_file(path, corrupt);
  CHECK(thrown_code([&] { load_checkpoint(path); }) == Errc::checksum_mismatch);

  // unsupported version
  std::string vbad = bytes;
  vbad[4] = 99;
  write_text_file(path, vbad);
  CHECK(thrown_code([&] { load_checkpoint(path); }) == Errc::version_unsupported);

  // wrong magic
  std::string mbad = bytes;
  mbad[0] = 'X';
  write_text_file(path, mbad);
  CHECK(thrown_code([&] { load_checkpoint(path); }) == Errc::parse_error);

  // truncation
  write_text_file(path, bytes.substr(0, bytes.size() / 2));
  CHECK(thrown_code([&] { load_checkpoint(path); }) == Errc::io_error);
}

TEST_CASE("projected teacher checkpoint size lands near the reported figure") {
  EncoderConfig teacher{12, 768, 3072, 12, 30522, 512, 0.0f};
  double projected_mb = static_cast<double>(count_params(teacher)) * 4.0 / 1e6;
  CHECK(std::abs(projected_mb - 440.0) / 440.0 < 0.02);

  EncoderConfig student{8, 256, 1024, 8, 30522, 512, 0.0f};
  double student_mb = static_cast<double>(count_params(student)) * 4.0 / 1e6;
  CHECK(std::abs(student_mb - 55.0) / 55.0 < 0.05);
}

TEST_CASE("synthetic domain determinism and degenerate spec") {
  SyntheticDomainSpec spec = default_domain_spec();
  spec.train_dialogs = 30;
  spec.dev_dialogs = 5;
  spec.test_dialogs = 5;
  spec.seed = 21;

  TempDir tmp;
  SyntheticDomain a = generate_synthetic_domain(spec);
  SyntheticDomain b = generate_synthetic_domain(spec);
  save_dialogs(a.train, tmp.file("a.json"));
  save_dialogs(b.train, tmp.file("b.json"));
  CHECK(read_text_file(tmp.file("a.json")) == read_text_file(tmp.file("b.json")));

  SyntheticDomainSpec one;
  one.ontology.informable = {{"food", {"chinese"}}};
  one.inform_templates = {{"food", {"i want {v} food"}}};
  one.closing_templates = {"thanks"};
  one.system_templates = {"ok"};
  one.train_dialogs = 1;
  one.dev_dialogs = 0;
  one.test_dialogs = 0;
  one.min_turns = 1;
  one.max_turns = 1;
  SyntheticDomain tiny = generate_synthetic_domain(one);
  REQUIRE(tiny.train.size() == 1);
  REQUIRE(tiny.train[0].turns.size() == 1);
  CHECK(tiny.train[0].turns[0].user_utterance == "i want chinese food");
  CHECK(tiny.train[0].turns[0].gold_turn_label ==
        std::vector<Candidate>{Candidate{"food", "chinese"}});
  CHECK(tiny.train[0].gold_states[0].goals.at("food") == "chinese");

  SyntheticDomainSpec bad = default_domain_spec();
  bad.min_turns = 3;
  bad.max_turns = 2;
  CHECK(thrown_code([&] { generate_synthetic_domain(bad); }) == Errc::invalid_spec);
}

TEST_CASE("synthetic corpus determinism and size") {
  CHECK(generate_synthetic_corpus(5, 1).size() == 1);
  std::vector<std::string> a = generate_synthetic_corpus(9, 500);
  std::vector<std::string> b = generate_synthetic_corpus(9, 500);
  CHECK(a == b);

  std::vector<std::string> big = generate_synthetic_corpus(1, 10000);
  std::set<std::string> words;
  for (const std::string& line : big)
    for (const std::string& w : split_words(line)) words.insert(w);
  CHECK(words.size() >= 300);
  CHECK(words.size() <= 700);
}

TEST_CASE("mutated dialog files always fail with a typed error", "[fuzz]") {
  SyntheticDomainSpec spec = default_domain_spec();
  spec.train_dialogs = 2;
  spec.dev_dialogs = 0;
  spec.test_dialogs = 0;
  SyntheticDomain domain = generate_synthetic_domain(spec);
  TempDir tmp;
  save_dialogs(domain.train, tmp.file("base.json"));
  std::string base = read_text_file(tmp.file("base.json"));

  Rng rng(2025);
  int rejected = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::string mutated = base;
    int kind = static_cast<int>(rng.below(3));
    if (kind == 0) {
      mutated = mutated.substr(0, rng.below(mutated.size()));
    } else if (kind == 1) {
      mutated[rng.below(mutated.size())] = static_cast<char>('!' + rng.below(90));
    } else {
      size_t pos = rng.below(mutated.size());
      mutated.insert(pos, "\"");
    }
    write_text_file(tmp.file("fuzz.json"), mutated);
    try {
      load_dialogs(tmp.file("fuzz.json"), domain.ontology);
    } catch (const Error&) {
      ++rejected;  // typed rejection is the only acceptable failure
    }
  }
  // most mutations break the file; every break must surface as dstd::Error
  CHECK(rejected > 100);
}
