#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace reflplan {

enum class ErrorCode {
  DuplicateNode,
  DanglingEdge,
  DuplicateEdge,
  WeightOutOfRange,
  InvalidNode,
  InvalidTopology,
  EmptyGraph,
  UnknownNode,
  NegativeQuantity,
  ParamOutOfRange,
  UnknownTarget,
  EpisodeTerminated,
  DimensionMismatch,
  UnfittedModel,
  InsufficientData,
  EmptyTemplateLibrary,
  AdapterUnavailable,
  UnknownTemplate,
  IndexOutOfBuffer,
  LengthMismatch,
  DegenerateWeights,
  ScoreOutOfRange,
  EmptyBatch,
  NonTrainableBackend,
  IncompleteLog,
  DegenerateDemand,
  ZeroBaseline,
  InsufficientSamples,
  InvalidConfig,
  CorruptLog,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateNode: return "DuplicateNode";
    case ErrorCode::DanglingEdge: return "DanglingEdge";
    case ErrorCode::DuplicateEdge: return "DuplicateEdge";
    case ErrorCode::WeightOutOfRange: return "WeightOutOfRange";
    case ErrorCode::InvalidNode: return "InvalidNode";
    case ErrorCode::InvalidTopology: return "InvalidTopology";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::UnknownNode: return "UnknownNode";
    case ErrorCode::NegativeQuantity: return "NegativeQuantity";
    case ErrorCode::ParamOutOfRange: return "ParamOutOfRange";
    case ErrorCode::UnknownTarget: return "UnknownTarget";
    case ErrorCode::EpisodeTerminated: return "EpisodeTerminated";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnfittedModel: return "UnfittedModel";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::EmptyTemplateLibrary: return "EmptyTemplateLibrary";
    case ErrorCode::AdapterUnavailable: return "AdapterUnavailable";
    case ErrorCode::UnknownTemplate: return "UnknownTemplate";
    case ErrorCode::IndexOutOfBuffer: return "IndexOutOfBuffer";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DegenerateWeights: return "DegenerateWeights";
    case ErrorCode::ScoreOutOfRange: return "ScoreOutOfRange";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::NonTrainableBackend: return "NonTrainableBackend";
    case ErrorCode::IncompleteLog: return "IncompleteLog";
    case ErrorCode::DegenerateDemand: return "DegenerateDemand";
    case ErrorCode::ZeroBaseline: return "ZeroBaseline";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::CorruptLog: return "CorruptLog";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

// Every failure in the library surfaces as this exception; `code()` is stable
// and the message names the offending element.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace reflplan
