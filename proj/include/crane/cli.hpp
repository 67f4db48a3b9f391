#pragma once

namespace crane {

// Full command-line front end. Returns the process exit code:
// 0 success, 1 validation failure, 2 I/O failure.
int run_cli(int argc, const char* const* argv);

}  // namespace crane
