#include "advbyte/error.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace advbyte {

namespace {
std::atomic<bool> g_warnings_enabled{true};
std::mutex g_warn_mutex;
}  // namespace

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::MalformedContainer: return "MalformedContainer";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::EmptyPerturbationMap: return "EmptyPerturbationMap";
    case ErrorKind::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::UsageError: return "UsageError";
  }
  return "Unknown";
}

void warn(std::string_view component, std::string_view message) {
  if (!g_warnings_enabled.load(std::memory_order_relaxed)) return;
  std::lock_guard lock(g_warn_mutex);
  std::cerr << "warning [" << component << "] " << message << '\n';
}

void set_warnings_enabled(bool enabled) noexcept {
  g_warnings_enabled.store(enabled, std::memory_order_relaxed);
}

}  // namespace advbyte
