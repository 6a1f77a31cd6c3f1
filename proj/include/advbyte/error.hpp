#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace advbyte {

enum class ErrorKind {
  MalformedContainer,
  InvalidSpec,
  InvalidConfig,
  ShapeMismatch,
  NonFiniteValue,
  EmptyPerturbationMap,
  EmptyEvaluation,
  CheckpointMismatch,
  IoError,
  UsageError,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Base of every error the library raises. The kind is stable and is what
/// the CLI reports in its machine-readable error record.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

/// Warnings go to stderr with a component tag; the sink can be silenced for
/// tests that deliberately trigger degenerate batches.
void warn(std::string_view component, std::string_view message);
void set_warnings_enabled(bool enabled) noexcept;

}  // namespace advbyte
