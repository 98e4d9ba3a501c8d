#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace latent_depth {

// Process exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitVerification = 3;

// Runs one subcommand: gen-synth, train-guided, train-color, eval, predict,
// gradcheck or report. args excludes the program name. Human-readable text
// goes to out, diagnostics to err; JSON results go to the --out file.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace latent_depth
