// Subword vocabulary, greedy longest-match tokenization, and packing of
// single sentences / sentence pairs into the model input layout:
//   [CLS] segment-a [SEP]            (single)
//   [CLS] segment-a [SEP] segment-b [SEP]   (pair)
#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "dstd/error.hpp"

namespace dstd {

constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kClsId = 2;
constexpr int kSepId = 3;
constexpr int kMaskId = 4;
constexpr int kNumSpecialTokens = 5;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> toks = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return toks;
}

struct Vocab {
  std::unordered_map<std::string, int> token_to_id;
  std::vector<std::string> id_to_token;

  int size() const { return static_cast<int>(id_to_token.size()); }

  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? -1 : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id.count(token) != 0; }

  void add(const std::string& token) {
    if (token_to_id.count(token)) return;
    token_to_id.emplace(token, size());
    id_to_token.push_back(token);
  }

  bool is_special_id(int id) const { return id >= 0 && id < kNumSpecialTokens; }
};

struct TokenSequence {
  std::vector<std::string> tokens;
  std::vector<int> ids;

  size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};

struct PackedInput {
  std::vector<int> ids;
  std::vector<int> segment_ids;
  std::vector<int> attention_mask;  // 1 = real token, 0 = padding

  int length() const { return static_cast<int>(ids.size()); }

  int real_length() const {
    int n = 0;
    for (int m : attention_mask) n += m;
    return n;
  }
};

// Lowercases and splits text into words; punctuation characters become
// standalone words, matching the uncased BERT basic tokenizer.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char ch : text) {
    char c = static_cast<char>(std::tolower(ch));
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else if (std::ispunct(static_cast<unsigned char>(c))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
      words.push_back(std::string(1, c));
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Builds a vocabulary from a corpus: the five specials, every corpus
// character (with its "##" continuation twin, so in-corpus text always
// tokenizes without [UNK]), then whole words and "##" suffix pieces by
// descending frequency, ties broken lexicographically.
inline Vocab build_vocab(const std::vector<std::string>& corpus, int target_size) {
  require(!corpus.empty(), Errc::empty_corpus, "corpus has no sentences");

  std::map<std::string, long long> word_freq;
  std::set<std::string> chars;
  for (const std::string& line : corpus) {
    for (const std::string& w : split_words(line)) {
      ++word_freq[w];
      for (char c : w) chars.insert(std::string(1, c));
    }
  }
  require(!word_freq.empty(), Errc::empty_corpus, "corpus has no tokens");

  size_t base = kNumSpecialTokens + 2 * chars.size();
  require(static_cast<size_t>(target_size) >= base, Errc::target_size_too_small,
          "target size " + std::to_string(target_size) + " cannot fit specials plus " +
              std::to_string(chars.size()) + " characters and their continuations");

  Vocab vocab;
  for (const std::string& t : special_tokens()) vocab.add(t);
  for (const std::string& c : chars) vocab.add(c);
  for (const std::string& c : chars) vocab.add("##" + c);

  // Candidate pieces: whole words plus every "##" suffix, weighted by the
  // frequency of the words they occur in. At equal frequency whole words
  // outrank suffix pieces, then ties break lexicographically.
  std::map<std::string, long long> suffix_freq;
  for (const auto& [word, freq] : word_freq)
    for (size_t i = 1; i + 1 < word.size(); ++i) suffix_freq["##" + word.substr(i)] += freq;

  struct Piece {
    std::string text;
    long long freq;
    bool is_suffix;
  };
  std::vector<Piece> ranked;
  ranked.reserve(word_freq.size() + suffix_freq.size());
  for (const auto& [word, freq] : word_freq) ranked.push_back({word, freq, false});
  for (const auto& [piece, freq] : suffix_freq) ranked.push_back({piece, freq, true});
  std::sort(ranked.begin(), ranked.end(), [](const Piece& a, const Piece& b) {
    if (a.freq != b.freq) return a.freq > b.freq;
    if (a.is_suffix != b.is_suffix) return !a.is_suffix;
    return a.text < b.text;
  });
  for (const Piece& p : ranked) {
    if (vocab.size() >= target_size) break;
    vocab.add(p.text);
  }
  return vocab;
}

// Greedy longest-match WordPiece over lowercased, punctuation-split words.
// A character missing from the vocabulary maps to [UNK]; matching resumes
// at the next character.
inline TokenSequence tokenize(const std::string& text, const Vocab& vocab) {
  TokenSequence out;
  for (const std::string& word : split_words(text)) {
    size_t start = 0;
    while (start < word.size()) {
      size_t end = word.size();
      int match_id = -1;
      size_t match_end = 0;
      while (end > start) {
        std::string piece = (start > 0 ? "##" : "") + word.substr(start, end - start);
        int id = vocab.id_of(piece);
        if (id >= 0) {
          match_id = id;
          match_end = end;
          break;
        }
        --end;
      }
      if (match_id < 0) {
        out.tokens.push_back(special_tokens()[kUnkId]);
        out.ids.push_back(kUnkId);
        ++start;
      } else {
        out.tokens.push_back(vocab.id_to_token[match_id]);
        out.ids.push_back(match_id);
        start = match_end;
      }
    }
  }
  return out;
}

// Joins a token sequence back into words, stripping "##" continuations.
inline std::string detokenize(const TokenSequence& seq) {
  std::string out;
  for (const std::string& t : seq.tokens) {
    if (t.size() > 2 && t.compare(0, 2, "##") == 0) {
      out += t.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += t;
    }
  }
  return out;
}

// [CLS] context [SEP] candidate [SEP], padded to max_len. The candidate is
// never truncated; the context loses its oldest tokens first.
inline PackedInput pack_pair(const TokenSequence& context, const TokenSequence& candidate,
                             int max_len) {
  int cand_len = static_cast<int>(candidate.size());
  require(cand_len + 3 <= max_len, Errc::candidate_too_long,
          "candidate of " + std::to_string(cand_len) + " tokens does not fit in max_len " +
              std::to_string(max_len));

  int ctx_budget = max_len - 3 - cand_len;
  int ctx_len = std::min<int>(ctx_budget, static_cast<int>(context.size()));
  int ctx_start = static_cast<int>(context.size()) - ctx_len;

  PackedInput packed;
  packed.ids.reserve(max_len);
  packed.ids.push_back(kClsId);
  for (int i = ctx_start; i < static_cast<int>(context.size()); ++i)
    packed.ids.push_back(context.ids[i]);
  packed.ids.push_back(kSepId);
  int seg_boundary = static_cast<int>(packed.ids.size());
  for (int id : candidate.ids) packed.ids.push_back(id);
  packed.ids.push_back(kSepId);

  int real = static_cast<int>(packed.ids.size());
  packed.ids.resize(max_len, kPadId);
  packed.segment_ids.assign(max_len, 0);
  for (int i = seg_boundary; i < real; ++i) packed.segment_ids[i] = 1;
  packed.attention_mask.assign(max_len, 0);
  for (int i = 0; i < real; ++i) packed.attention_mask[i] = 1;
  return packed;
}

// [CLS] sentence [SEP], tail-truncated to max_len - 2 and padded.
inline PackedInput pack_single(const TokenSequence& sentence, int max_len) {
  require(max_len >= 2, Errc::invalid_config, "pack_single needs max_len >= 2");
  int keep = std::min<int>(max_len - 2, static_cast<int>(sentence.size()));

  PackedInput packed;
  packed.ids.reserve(max_len);
  packed.ids.push_back(kClsId);
  for (int i = 0; i < keep; ++i) packed.ids.push_back(sentence.ids[i]);
  packed.ids.push_back(kSepId);

  int real = static_cast<int>(packed.ids.size());
  packed.ids.resize(max_len, kPadId);
  packed.segment_ids.assign(max_len, 0);
  packed.attention_mask.assign(max_len, 0);
  for (int i = 0; i < real; ++i) packed.attention_mask[i] = 1;
  return packed;
}

// Vocab file format: one token per line, line number = id.
inline void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Errc::io_error, "cannot open " + path + " for writing");
  for (const std::string& t : vocab.id_to_token) out << t << '\n';
  out.flush();
  require(out.good(), Errc::io_error, "failed writing " + path);
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::io_error, "cannot open " + path);
  Vocab vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(!vocab.contains(line), Errc::parse_error, "duplicate token '" + line + "' in " + path);
    vocab.add(line);
  }
  require(vocab.size() >= kNumSpecialTokens, Errc::parse_error,
          path + " is missing the special tokens");
  for (int i = 0; i < kNumSpecialTokens; ++i)
    require(vocab.id_to_token[i] == special_tokens()[i], Errc::parse_error,
            "special token mismatch at id " + std::to_string(i) + " in " + path);
  return vocab;
}

inline std::vector<std::string> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::io_error, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace dstd
