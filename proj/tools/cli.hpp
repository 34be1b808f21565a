#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace atelier::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

// args excludes the program name. Normal output goes to `out`, usage text
// and diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace atelier::cli
