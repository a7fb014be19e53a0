#pragma once

#include <string>
#include <vector>

namespace cflow::cli {

/// Subcommand dispatch for the cflownet binary. Returns the process exit
/// code: 0 success, 1 runtime/criterion failure, 2 usage or config error.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

} // namespace cflow::cli
