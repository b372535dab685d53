#include <iostream>
#include <string>
#include <vector>

#include "lumen/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return lumen::run_cli(args, std::cout, std::cerr);
}
