// File formats: the versioned binary checkpoint (magic, config, vocab,
// float32 payload, CRC32) and the JSON ontology / dialog schemas.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dstd/dst.hpp"
#include "dstd/encoder.hpp"
#include "dstd/error.hpp"
#include "dstd/tokenizer.hpp"

namespace dstd {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSON parsing with duplicate-key detection
// ---------------------------------------------------------------------------

namespace detail {

struct DupKeySax : public nlohmann::json_sax<json> {
  std::vector<std::set<std::string>> object_stack;
  std::string first_duplicate;
  bool saw_duplicate = false;

  bool key(std::string& val) override {
    if (!object_stack.empty() && !object_stack.back().insert(val).second && !saw_duplicate) {
      saw_duplicate = true;
      first_duplicate = val;
    }
    return true;
  }
  bool start_object(std::size_t) override {
    object_stack.emplace_back();
    return true;
  }
  bool end_object() override {
    object_stack.pop_back();
    return true;
  }
  bool null() override { return true; }
  bool boolean(bool) override { return true; }
  bool number_integer(number_integer_t) override { return true; }
  bool number_unsigned(number_unsigned_t) override { return true; }
  bool number_float(number_float_t, const std::string&) override { return true; }
  bool string(string_t&) override { return true; }
  bool binary(binary_t&) override { return true; }
  bool start_array(std::size_t) override { return true; }
  bool end_array() override { return true; }
  bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception&) override {
    return false;
  }
};

}  // namespace detail

// Parses JSON text, reporting the first duplicate object key if any.
inline json parse_json_text(const std::string& text, const std::string& origin,
                            std::string* duplicate_key = nullptr) {
  detail::DupKeySax sax;
  bool ok = json::sax_parse(text, &sax);
  require(ok, Errc::parse_error, "invalid JSON in " + origin);
  if (duplicate_key != nullptr) *duplicate_key = sax.saw_duplicate ? sax.first_duplicate : "";
  return json::parse(text);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::io_error, "cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), Errc::io_error, "failed reading " + path);
  return text;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), Errc::io_error, "cannot open " + tmp + " for writing");
    out << text;
    out.flush();
    require(out.good(), Errc::io_error, "failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, Errc::io_error, "cannot rename " + tmp + " to " + path);
}

// ---------------------------------------------------------------------------
// Ontology & dialog files
// ---------------------------------------------------------------------------

// {"informable": {"food": ["chinese", ...], ...}, "requestable": ["phone", ...]}
inline Ontology load_ontology(const std::string& path) {
  try {
    std::string duplicate;
    json j = parse_json_text(read_text_file(path), path, &duplicate);
    require(duplicate.empty(), Errc::duplicate_slot,
            "duplicate key '" + duplicate + "' in " + path);
    require(j.is_object() && j.contains("informable") && j.contains("requestable"),
            Errc::missing_field, path + " needs 'informable' and 'requestable'");

    Ontology ont;
    require(j["informable"].is_object(), Errc::parse_error, "'informable' must be an object");
    for (const auto& [slot, values] : j["informable"].items()) {
      require(values.is_array(), Errc::parse_error, "values of '" + slot + "' must be an array");
      require(!values.empty(), Errc::empty_value_list, "slot '" + slot + "' has no values");
      for (const auto& v : values) {
        require(v.is_string(), Errc::parse_error, "values of '" + slot + "' must be strings");
        ont.informable[slot].push_back(v.get<std::string>());
      }
    }
    require(j["requestable"].is_array(), Errc::parse_error, "'requestable' must be an array");
    for (const auto& v : j["requestable"]) {
      require(v.is_string(), Errc::parse_error, "requestable slots must be strings");
      ont.requestable.push_back(v.get<std::string>());
    }
    validate_ontology(ont);
    return ont;
  } catch (const Error&) {
    throw;
  } catch (const json::exception& e) {
    fail(Errc::parse_error, std::string(e.what()) + " in " + path);
  }
}

inline void save_ontology(const Ontology& ont, const std::string& path) {
  json j;
  j["informable"] = json::object();
  for (const auto& [slot, values] : ont.informable) j["informable"][slot] = values;
  j["requestable"] = ont.requestable;
  write_text_file(path, j.dump(2) + "\n");
}

struct LabeledDialog {
  std::vector<DialogTurn> turns;
  std::vector<DialogState> gold_states;  // cumulative, one per turn
};

inline Candidate candidate_from_pair(const json& pair, const std::string& origin) {
  require(pair.is_array() && pair.size() == 2 && pair[0].is_string() && pair[1].is_string(),
          Errc::parse_error, "labels must be [slot, value] string pairs in " + origin);
  return Candidate{pair[0].get<std::string>(), pair[1].get<std::string>()};
}

// {"dialogs": [{"turns": [{"system": "...", "user": "...",
//   "turn_label": [["food","chinese"], ["request","phone"]],
//   "gold_state": {"goals": {"food": "chinese"}, "requests": ["phone"]}}]}]}
inline std::vector<LabeledDialog> load_dialogs(const std::string& path, const Ontology& ontology) {
  try {
    std::string duplicate;
    json j = parse_json_text(read_text_file(path), path, &duplicate);
    require(duplicate.empty(), Errc::parse_error, "duplicate key '" + duplicate + "' in " + path);
    require(j.is_object() && j.contains("dialogs") && j["dialogs"].is_array(), Errc::missing_field,
            path + " needs a 'dialogs' array");

    auto check_label = [&](const Candidate& c) {
      require(candidate_in_ontology(ontology, c), Errc::label_not_in_ontology,
              "label " + c.text() + " not in ontology (" + path + ")");
    };

    std::vector<LabeledDialog> dialogs;
    for (const json& jd : j["dialogs"]) {
      require(jd.contains("turns") && jd["turns"].is_array(), Errc::missing_field,
              "dialog without 'turns' in " + path);
      LabeledDialog dialog;
      for (const json& jt : jd["turns"]) {
        for (const char* field : {"system", "user", "turn_label", "gold_state"})
          require(jt.contains(field), Errc::missing_field,
                  std::string("turn missing '") + field + "' in " + path);
        DialogTurn turn;
        turn.system_utterance = jt["system"].get<std::string>();
        turn.user_utterance = jt["user"].get<std::string>();
        for (const json& pair : jt["turn_label"]) {
          Candidate c = candidate_from_pair(pair, path);
          check_label(c);
          turn.gold_turn_label.push_back(c);
        }
        const json& js = jt["gold_state"];
        require(js.contains("goals") && js.contains("requests"), Errc::missing_field,
                "gold_state needs 'goals' and 'requests' in " + path);
        DialogState state;
        for (const auto& [slot, value] : js["goals"].items()) {
          Candidate c{slot, value.get<std::string>()};
          check_label(c);
          state.goals[slot] = c.value;
        }
        for (const json& r : js["requests"]) {
          Candidate c{kRequestSlot, r.get<std::string>()};
          check_label(c);
          state.requests.insert(c.value);
        }
        dialog.turns.push_back(std::move(turn));
        dialog.gold_states.push_back(std::move(state));
      }
      dialogs.push_back(std::move(dialog));
    }
    return dialogs;
  } catch (const Error&) {
    throw;
  } catch (const json::exception& e) {
    fail(Errc::parse_error, std::string(e.what()) + " in " + path);
  }
}

inline void save_dialogs(const std::vector<LabeledDialog>& dialogs, const std::string& path) {
  json out;
  out["dialogs"] = json::array();
  for (const LabeledDialog& dialog : dialogs) {
    json jd;
    jd["turns"] = json::array();
    for (size_t t = 0; t < dialog.turns.size(); ++t) {
      const DialogTurn& turn = dialog.turns[t];
      json jt;
      jt["system"] = turn.system_utterance;
      jt["user"] = turn.user_utterance;
      jt["turn_label"] = json::array();
      for (const Candidate& c : turn.gold_turn_label)
        jt["turn_label"].push_back({c.slot, c.value});
      json goals = json::object();
      for (const auto& [slot, value] : dialog.gold_states[t].goals) goals[slot] = value;
      jt["gold_state"] = {{"goals", goals},
                          {"requests", std::vector<std::string>(
                                           dialog.gold_states[t].requests.begin(),
                                           dialog.gold_states[t].requests.end())}};
      jd["turns"].push_back(std::move(jt));
    }
    out["dialogs"].push_back(std::move(jd));
  }
  write_text_file(path, out.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

constexpr std::array<char, 4> kCheckpointMagic = {'D', 'S', 'T', 'D'};
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u64(std::string& buf, uint64_t v) {
  put_u32(buf, static_cast<uint32_t>(v & 0xffffffffULL));
  put_u32(buf, static_cast<uint32_t>(v >> 32));
}

inline void put_f32(std::string& buf, float v) { put_u32(buf, std::bit_cast<uint32_t>(v)); }

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  const std::string& origin;

  void need(size_t n) const {
    require(pos + n <= buf.size(), Errc::io_error, "truncated checkpoint " + origin);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline uint32_t crc32(const char* data, size_t n) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i)
    c = table[(c ^ static_cast<uint8_t>(data[i])) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

}  // namespace detail

// Layout: magic, version, config (6 x u32 + f32 dropout), vocab block,
// u64 float count, float32 payload in canonical tensor order, CRC32 of the
// payload bytes. Everything little-endian. Writes are atomic via a
// temp-file rename.
inline void save_checkpoint(const ModelParams& params, const Vocab& vocab,
                            const std::string& path) {
  const EncoderConfig& c = params.config;
  require(c.vocab_size == vocab.size(), Errc::vocab_mismatch,
          "vocab size does not match checkpoint config");

  std::string buf;
  buf.append(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<uint32_t>(c.layers));
  detail::put_u32(buf, static_cast<uint32_t>(c.hidden));
  detail::put_u32(buf, static_cast<uint32_t>(c.ffn));
  detail::put_u32(buf, static_cast<uint32_t>(c.heads));
  detail::put_u32(buf, static_cast<uint32_t>(c.vocab_size));
  detail::put_u32(buf, static_cast<uint32_t>(c.max_positions));
  detail::put_f32(buf, c.dropout_rate);

  detail::put_u32(buf, static_cast<uint32_t>(vocab.size()));
  for (const std::string& tok : vocab.id_to_token) {
    detail::put_u32(buf, static_cast<uint32_t>(tok.size()));
    buf.append(tok);
  }

  uint64_t count = 0;
  visit_tensors(const_cast<ModelParams&>(params),
                [&](const char*, float*, size_t n, bool) { count += n; });
  detail::put_u64(buf, count);
  size_t payload_begin = buf.size();
  buf.reserve(buf.size() + count * 4);
  visit_tensors(const_cast<ModelParams&>(params), [&](const char*, float* data, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) detail::put_f32(buf, data[i]);
  });
  detail::put_u32(buf, detail::crc32(buf.data() + payload_begin, buf.size() - payload_begin));

  write_text_file(path, buf);
}

struct LoadedCheckpoint {
  ModelParams params;
  Vocab vocab;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::string buf = read_text_file(path);
  detail::ByteReader r{buf, 0, path};

  std::string magic = r.bytes(4);
  require(std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin()), Errc::parse_error,
          path + " is not a checkpoint file");
  uint32_t version = r.u32();
  require(version == kCheckpointVersion, Errc::version_unsupported,
          "checkpoint version " + std::to_string(version) + " not supported");

  EncoderConfig config;
  config.layers = static_cast<int>(r.u32());
  config.hidden = static_cast<int>(r.u32());
  config.ffn = static_cast<int>(r.u32());
  config.heads = static_cast<int>(r.u32());
  config.vocab_size = static_cast<int>(r.u32());
  config.max_positions = static_cast<int>(r.u32());
  config.dropout_rate = r.f32();
  validate_config(config);

  uint32_t vocab_count = r.u32();
  require(static_cast<int>(vocab_count) == config.vocab_size, Errc::parse_error,
          "vocab block size disagrees with config in " + path);
  LoadedCheckpoint out;
  for (uint32_t i = 0; i < vocab_count; ++i) {
    uint32_t len = r.u32();
    out.vocab.add(r.bytes(len));
  }
  require(out.vocab.size() == static_cast<int>(vocab_count), Errc::parse_error,
          "duplicate vocab entries in " + path);

  uint64_t count = r.u64();
  size_t payload_begin = r.pos;
  r.need(count * 4 + 4);

  out.params = alloc_params<float>(config);
  uint64_t expected = 0;
  visit_tensors(out.params, [&](const char*, float*, size_t n, bool) { expected += n; });
  require(expected == count, Errc::parse_error,
          "payload float count disagrees with config in " + path);
  visit_tensors(out.params, [&](const char*, float* data, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) data[i] = r.f32();
  });

  uint32_t stored_crc = r.u32();
  uint32_t actual_crc = detail::crc32(buf.data() + payload_begin, count * 4);
  require(stored_crc == actual_crc, Errc::checksum_mismatch,
          "payload checksum mismatch in " + path);
  require(r.pos == buf.size(), Errc::parse_error, "trailing bytes in " + path);
  return out;
}

}  // namespace dstd
