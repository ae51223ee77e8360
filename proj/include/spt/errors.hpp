// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace spt {

enum class Errc {
  SequenceTooLong,
  TokenOutOfRange,
  EmptyTargetMask,
  ShapeMismatch,
  UnknownTarget,
  CacheMismatch,
  MissingSpToken,
  FractionOutOfRange,
  EmptyDataset,
  NonFiniteLoss,
  MissingSegment,
  GrammarOverflow,
  CriteriaNotMet,
  MissingCounterpart,
  MissingAssistantTurn,
  EmptyCorpus,
  DegenerateSubset,
  SingleClass,
  EmptySpan,
  IdenticalModels,
  OutOfRange,
  ConfigInvalid,
  MissingArtifact,
  IoError,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::SequenceTooLong: return "SequenceTooLong";
    case Errc::TokenOutOfRange: return "TokenOutOfRange";
    case Errc::EmptyTargetMask: return "EmptyTargetMask";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::UnknownTarget: return "UnknownTarget";
    case Errc::CacheMismatch: return "CacheMismatch";
    case Errc::MissingSpToken: return "MissingSpToken";
    case Errc::FractionOutOfRange: return "FractionOutOfRange";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::MissingSegment: return "MissingSegment";
    case Errc::GrammarOverflow: return "GrammarOverflow";
    case Errc::CriteriaNotMet: return "CriteriaNotMet";
    case Errc::MissingCounterpart: return "MissingCounterpart";
    case Errc::MissingAssistantTurn: return "MissingAssistantTurn";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::DegenerateSubset: return "DegenerateSubset";
    case Errc::SingleClass: return "SingleClass";
    case Errc::EmptySpan: return "EmptySpan";
    case Errc::IdenticalModels: return "IdenticalModels";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::MissingArtifact: return "MissingArtifact";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
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

}  // namespace spt
