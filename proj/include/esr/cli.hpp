#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace esr::cli {

/// Runs `esr-forge` with `args` (program name excluded). Returns the process
/// exit code: 0 success, 1 validation or runtime failure, 2 usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Thread count after applying the ESR_FORGE_THREADS override.
std::size_t resolve_threads(std::size_t flag_value);

}  // namespace esr::cli
