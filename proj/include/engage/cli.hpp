#pragma once

#include <iosfwd>

namespace engage::cli {

// Runs the `engage` command line. Returns the process exit code: 0 on
// success, 1 for operational failures (a JSON error record is written to
// `err`), 2 for usage errors.
int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace engage::cli
