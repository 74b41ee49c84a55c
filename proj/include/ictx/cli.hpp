#pragma once

#include <ostream>

namespace ictx {

/// Entry point of the ictx binary. Returns 0 on success, 1 for validation
/// errors, 2 for runtime and backend errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ictx
