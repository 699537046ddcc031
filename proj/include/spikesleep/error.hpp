#pragma once

#include <stdexcept>
#include <string>

namespace spikesleep {

enum class ErrorKind {
  FileNotFound,
  MalformedHeader,
  ChannelAbsent,
  RateMismatch,
  UnrecognizedLabel,
  RecordTooShort,
  EmptyInput,
  InvalidArgument,
  InvalidEdges,
  UnsupportedOrder,
  NonFinite,
  ShapeMismatch,
  LengthMismatch,
  ConfigMismatch,
  ParseError,
  IoError,
  NonFiniteLoss,
  TooFewSubjects,
  EmptyFold,
  Validation,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::FileNotFound: return "file-not-found";
    case ErrorKind::MalformedHeader: return "malformed-header";
    case ErrorKind::ChannelAbsent: return "channel-absent";
    case ErrorKind::RateMismatch: return "rate-mismatch";
    case ErrorKind::UnrecognizedLabel: return "unrecognized-label";
    case ErrorKind::RecordTooShort: return "record-too-short";
    case ErrorKind::EmptyInput: return "empty-input";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::InvalidEdges: return "invalid-edges";
    case ErrorKind::UnsupportedOrder: return "unsupported-order";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::LengthMismatch: return "length-mismatch";
    case ErrorKind::ConfigMismatch: return "config-mismatch";
    case ErrorKind::ParseError: return "parse-error";
    case ErrorKind::IoError: return "io-error";
    case ErrorKind::NonFiniteLoss: return "non-finite-loss";
    case ErrorKind::TooFewSubjects: return "too-few-subjects";
    case ErrorKind::EmptyFold: return "empty-fold";
    case ErrorKind::Validation: return "validation";
  }
  return "unknown";
}

// Every library failure is reported as an Error carrying a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  // Message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

}  // namespace spikesleep
