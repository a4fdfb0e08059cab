#include <iostream>
#include <string>
#include <vector>

#include "gradprobe/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return gradprobe::cli::run(args, std::cout, std::cerr);
}
