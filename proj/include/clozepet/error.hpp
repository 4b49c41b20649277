#pragma once

#include <stdexcept>
#include <string>

namespace clozepet {

enum class ErrorCode {
  UnknownLabel,
  InvalidConfig,
  NoMaskPresent,
  SequenceTooLong,
  HeadMissing,
  EmptyCorpus,
  MalformedTarget,
  TemplateOverflow,
  PoolTooSmall,
  EmptyUnlabeled,
  EmptyEvaluation,
  MissingCorpus,
  TooManyGroups,
  LengthMismatch,
  TooFewRuns,
  MixedStrata,
  BadCheckpoint,
  IoError,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NoMaskPresent: return "NoMaskPresent";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::HeadMissing: return "HeadMissing";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::MalformedTarget: return "MalformedTarget";
    case ErrorCode::TemplateOverflow: return "TemplateOverflow";
    case ErrorCode::PoolTooSmall: return "PoolTooSmall";
    case ErrorCode::EmptyUnlabeled: return "EmptyUnlabeled";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::MissingCorpus: return "MissingCorpus";
    case ErrorCode::TooManyGroups: return "TooManyGroups";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::TooFewRuns: return "TooFewRuns";
    case ErrorCode::MixedStrata: return "MixedStrata";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace clozepet
