#include <iostream>
#include <string>
#include <vector>

#include "dcdnet/cli.hpp"

int main(int argc, char** argv) {
  return dcdnet::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
