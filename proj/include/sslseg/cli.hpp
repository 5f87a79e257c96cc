#pragma once

#include <string>
#include <vector>

namespace sslseg {

/// Entry point behind the binary; exposed for in-process CLI tests.
/// Returns 0 on success, 1 on validation/usage errors, 2 on runtime
/// failures.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

/// All invariant violations found in a config file, empty when valid.
std::vector<std::string> validate_config_file(const std::string& path);

}  // namespace sslseg
