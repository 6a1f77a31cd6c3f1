#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace advbyte::cli {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kRunManifest = "run_manifest.json";

/// Runs one subcommand. Returns 0 on success, 2 on usage errors and 1 on
/// domain errors; failures print a one-line JSON error record to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, const char* const* argv);

}  // namespace advbyte::cli
