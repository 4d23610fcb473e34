#include <iostream>

#include "cpf/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cpf::run_cli(args, std::cout, std::cerr);
}
