#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fairnav {

/// Entry point behind the `fairnav` executable. `args` excludes the program
/// name. Results go to `out`, diagnostics to `err`; returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fairnav
