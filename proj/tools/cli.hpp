#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace geomatch::cli {

inline constexpr std::string_view kVersion = "0.1.0";

/// Runs one subcommand. `args` excludes the program name. JSON reports go to
/// `out`, logs and diagnostics to `err`. Returns the process exit code:
/// 0 success, 1 usage, 2 data, 3 numerical.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace geomatch::cli
