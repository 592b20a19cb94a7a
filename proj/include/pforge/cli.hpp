#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pforge {

/// Runs one portrait-forge command. `args` excludes the program name.
/// Returns 0 on success, 1 when the operation fails (a JSON diagnostic is
/// written to `err`), 2 on usage errors.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cli_main(int argc, char** argv);

}  // namespace pforge
