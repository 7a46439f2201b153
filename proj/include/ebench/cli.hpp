#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ebench::cli {

// Entry point of the bench tool. args excludes the program name. Returns the
// process exit code: 0 ok, 2 schema/usage, 3 empty peer group, 4 model
// contract, 5 internal.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ebench::cli
