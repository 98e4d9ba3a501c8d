#include <iostream>
#include <string>
#include <vector>

#include "latent_depth/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return latent_depth::run_cli(args, std::cout, std::cerr);
}
