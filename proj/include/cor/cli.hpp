#pragma once

#include <iosfwd>

namespace cor {

// Exit codes: 0 success, 1 operational error, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;

// Results go to `out`, logs and usage messages to `err`. The human answerer
// reads from `in`.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err, std::istream& in);
int cli_dispatch(int argc, const char* const* argv);

}  // namespace cor
