#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ecgclip {

/// Runs one command line (args exclude the program name). Returns 0 on
/// success, 1 for usage errors, 2 for data errors, 3 for numeric failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Path of the metadata file that accompanies an imported embedding table.
std::string sidecar_path(const std::string& table_path);

}  // namespace ecgclip
