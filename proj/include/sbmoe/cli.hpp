#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sbmoe::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kDataError = 2,
  kNumericError = 3,
};

// Entry point of the `sbmoe` executable. Machine-readable results go to
// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Worker threads for retrieval: SBMOE_THREADS if set and positive, else the
// hardware concurrency.
std::size_t thread_budget();

}  // namespace sbmoe::cli
