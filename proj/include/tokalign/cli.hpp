#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tokalign {

/// Exit codes: 0 success, 1 usage or configuration error, 2 data,
/// format or compatibility error.
int cli(int argc, char** argv);
/// Same, with explicit arguments (excluding the program name) and streams.
int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tokalign
