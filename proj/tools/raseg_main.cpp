#include <iostream>
#include <string>
#include <vector>

#include "raseg/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return raseg::cli::run(args, std::cout, std::cerr);
}
