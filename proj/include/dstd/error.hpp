// Error codes shared by every module, plus the process exit-code mapping
// used by the CLI.
#pragma once

#include <stdexcept>
#include <string>

namespace dstd {

enum class Errc {
  // tokenizer
  empty_corpus,
  target_size_too_small,
  candidate_too_long,
  // encoder / numerics
  invalid_config,
  input_too_long,
  id_out_of_range,
  non_finite,
  shape_mismatch,
  length_mismatch,
  // dst
  conflicting_values,
  label_not_in_ontology,
  // distill
  vocab_mismatch,
  nothing_to_mask,
  // data_io
  parse_error,
  duplicate_slot,
  empty_value_list,
  missing_field,
  io_error,
  checksum_mismatch,
  version_unsupported,
  invalid_spec,
  // cli / bench
  too_few_turns,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::empty_corpus: return "EmptyCorpus";
    case Errc::target_size_too_small: return "TargetSizeTooSmall";
    case Errc::candidate_too_long: return "CandidateTooLong";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::input_too_long: return "InputTooLong";
    case Errc::id_out_of_range: return "IdOutOfRange";
    case Errc::non_finite: return "NonFinite";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::conflicting_values: return "ConflictingValues";
    case Errc::label_not_in_ontology: return "LabelNotInOntology";
    case Errc::vocab_mismatch: return "VocabMismatch";
    case Errc::nothing_to_mask: return "NothingToMask";
    case Errc::parse_error: return "ParseError";
    case Errc::duplicate_slot: return "DuplicateSlot";
    case Errc::empty_value_list: return "EmptyValueList";
    case Errc::missing_field: return "MissingField";
    case Errc::io_error: return "IoError";
    case Errc::checksum_mismatch: return "ChecksumMismatch";
    case Errc::version_unsupported: return "VersionUnsupported";
    case Errc::invalid_spec: return "InvalidSpec";
    case Errc::too_few_turns: return "TooFewTurns";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

// Exit codes, grouped by failure class. 1 is reserved for unexpected
// exceptions, 2 for usage and input-file problems.
inline int exit_code_for(Errc c) {
  switch (c) {
    case Errc::parse_error:
    case Errc::io_error:
    case Errc::missing_field:
    case Errc::invalid_spec:
    case Errc::invalid_config:
      return 2;
    case Errc::empty_corpus:
    case Errc::target_size_too_small:
    case Errc::duplicate_slot:
    case Errc::empty_value_list:
    case Errc::label_not_in_ontology:
    case Errc::conflicting_values:
      return 3;
    case Errc::candidate_too_long:
    case Errc::input_too_long:
    case Errc::id_out_of_range:
    case Errc::shape_mismatch:
    case Errc::length_mismatch:
    case Errc::vocab_mismatch:
    case Errc::nothing_to_mask:
      return 4;
    case Errc::non_finite:
      return 5;
    case Errc::checksum_mismatch:
    case Errc::version_unsupported:
      return 6;
    case Errc::too_few_turns:
      return 7;
  }
  return 1;
}

}  // namespace dstd
