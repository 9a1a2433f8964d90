#include <iostream>
#include <string>
#include <vector>

#include "quantkit/cli.hpp"

int main(int argc, char** argv) {
  return quantkit::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
