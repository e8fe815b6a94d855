#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace attrobf::cli {

/// Keys owned by the command line itself (data, paths, toy and service settings),
/// with their defaults. Train and network keys come from TrainConfig and NetConfig.
const std::map<std::string, std::string>& default_settings();

/// Parses argv, dispatches the verb and returns the process exit status:
/// 0 success, 1 runtime failure (one "error: ..." line on err), 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace attrobf::cli
