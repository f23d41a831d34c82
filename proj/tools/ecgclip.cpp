#include <iostream>

#include "ecgclip/cli.hpp"

int main(int argc, char** argv) {
  return ecgclip::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
