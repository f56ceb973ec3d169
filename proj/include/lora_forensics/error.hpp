// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lf {

// Failure taxonomy shared by every module. Callers match on the code;
// messages are for humans.
enum class ErrorCode {
  // container / manifest
  MalformedHeader,
  ShapeMismatch,
  MissingPartner,
  OverlappingOffsets,
  IoFailure,
  MissingFile,
  DuplicateEntry,
  LabelParseError,
  // numerics
  NonFiniteInput,
  DimensionMismatch,
  NotSymmetric,
  NoConvergence,
  // feature assembly / predictors
  UnlabeledSnapshot,
  InconsistentTopology,
  EmptyClass,
  SingularSystem,
  InconsistentTables,
  EmptyTable,
  TopologyMismatch,
  ModelFormatError,
  // metrics / harness
  LengthMismatch,
  ZeroTruthLabel,
  TooFewRepeats,
  TooFewGroups,
  // generator / config
  LabelNotInClassSet,
  ConfigError,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingPartner: return "MissingPartner";
    case ErrorCode::OverlappingOffsets: return "OverlappingOffsets";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::DuplicateEntry: return "DuplicateEntry";
    case ErrorCode::LabelParseError: return "LabelParseError";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NotSymmetric: return "NotSymmetric";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::UnlabeledSnapshot: return "UnlabeledSnapshot";
    case ErrorCode::InconsistentTopology: return "InconsistentTopology";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::InconsistentTables: return "InconsistentTables";
    case ErrorCode::EmptyTable: return "EmptyTable";
    case ErrorCode::TopologyMismatch: return "TopologyMismatch";
    case ErrorCode::ModelFormatError: return "ModelFormatError";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ZeroTruthLabel: return "ZeroTruthLabel";
    case ErrorCode::TooFewRepeats: return "TooFewRepeats";
    case ErrorCode::TooFewGroups: return "TooFewGroups";
    case ErrorCode::LabelNotInClassSet: return "LabelNotInClassSet";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace lf
