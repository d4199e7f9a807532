#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bayes_layers {

enum class ErrorKind {
  kShape,          // incompatible or malformed shapes
  kDomain,         // input outside an operation's mathematical domain
  kInvalidArgument,
  kDetached,       // tensor is not on a differentiation tape
  kNotReversible,  // reverse / log_det_jacobian requested but not implemented
  kUnsupported,    // e.g. KL between an unsupported distribution pair
  kNumerical,      // Cholesky failure after jitter escalation
  kNonFinite,      // NaN / Inf detected in a training loss
  kParse,          // CSV, config, or checkpoint parse failure
  kIo,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kDetached: return "detached tensor";
    case ErrorKind::kNotReversible: return "not reversible";
    case ErrorKind::kUnsupported: return "unsupported";
    case ErrorKind::kNumerical: return "numerical error";
    case ErrorKind::kNonFinite: return "non-finite value";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kIo: return "i/o error";
  }
  return "error";
}

/// Single exception type for the library; `kind()` distinguishes failure classes
/// so that wrappers (e.g. Sequential) can add context without losing the category.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        message_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace bayes_layers
