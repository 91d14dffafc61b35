#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mps {

enum class ErrorKind {
  ZeroRow,
  ShapeMismatch,
  NonFinite,
  BadOrder,
  TooLarge,
  WeightMismatch,
  EmptyPositives,
  BadDepth,
  BadLayer,
  BadGrouping,
  DegenerateInput,
  DegenerateClustering,
  NotAProbability,
  UnknownVariant,
  InsufficientSamples,
  BadConfig,
  BadFlag,
  ParseError,
  IdMismatch,
  DimMismatch,
  IoError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ZeroRow: return "ZeroRow";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::BadOrder: return "BadOrder";
    case ErrorKind::TooLarge: return "TooLarge";
    case ErrorKind::WeightMismatch: return "WeightMismatch";
    case ErrorKind::EmptyPositives: return "EmptyPositives";
    case ErrorKind::BadDepth: return "BadDepth";
    case ErrorKind::BadLayer: return "BadLayer";
    case ErrorKind::BadGrouping: return "BadGrouping";
    case ErrorKind::DegenerateInput: return "DegenerateInput";
    case ErrorKind::DegenerateClustering: return "DegenerateClustering";
    case ErrorKind::NotAProbability: return "NotAProbability";
    case ErrorKind::UnknownVariant: return "UnknownVariant";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::BadFlag: return "BadFlag";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::IdMismatch: return "IdMismatch";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Process exit code for an error kind: 2 config/usage, 3 parse/data, 4 numeric.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::BadConfig:
    case ErrorKind::BadFlag:
    case ErrorKind::UnknownVariant:
    case ErrorKind::BadOrder:
    case ErrorKind::BadDepth:
    case ErrorKind::BadLayer:
    case ErrorKind::BadGrouping:
      return 2;
    case ErrorKind::ZeroRow:
    case ErrorKind::NonFinite:
    case ErrorKind::DegenerateInput:
    case ErrorKind::DegenerateClustering:
    case ErrorKind::NotAProbability:
      return 4;
    default:
      return 3;
  }
}

/// Exception carrying a machine-checkable kind; the CLI maps kinds to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// The message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

}  // namespace mps
