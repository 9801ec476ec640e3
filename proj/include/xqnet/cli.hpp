#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace xqnet {

/// Runs one subcommand. `args` excludes the program name.
/// Returns 0 on success, 1 on runtime failure, 2 on usage errors.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xqnet
