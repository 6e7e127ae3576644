#ifndef SPANSET_TOOLS_CLI_HPP
#define SPANSET_TOOLS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace spanset::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

/// Runs one command line (without the program name). Messages go to `out`
/// and `err`; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spanset::cli

#endif  // SPANSET_TOOLS_CLI_HPP
