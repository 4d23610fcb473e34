#pragma once

// The `cpf` command line: train, generate, reconstruct, evaluate, segment,
// plot. Exit codes: 0 success, 2 usage or configuration, 3 runtime or numeric.

#include <ostream>
#include <string>
#include <vector>

namespace cpf {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cpf
