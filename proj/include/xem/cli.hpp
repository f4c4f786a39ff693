#pragma once

// Command-line front end. run_cli takes the argument list without the program
// name and returns the process exit code:
//   0 success, 1 runtime failure (NaN abort, I/O), 2 usage error,
//   3 validation/configuration error.
// Each subcommand accepts --config <json> (same schema as the config.json it
// writes); explicit flags override config-file values, and the resolved
// config is dumped to the output directory before any heavy work starts.

#include <string>
#include <vector>

namespace xem {

int run_cli(const std::vector<std::string>& args);

}  // namespace xem
