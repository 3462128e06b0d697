#include <iostream>

#include "engage/cli.hpp"

int main(int argc, char** argv) {
  std::ios::sync_with_stdio(false);
  return engage::cli::run(argc, argv, std::cin, std::cout, std::cerr);
}
