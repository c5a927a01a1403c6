#include <iostream>

#include "hfcnn/cli.hpp"

int main(int argc, char** argv) {
  return hfcnn::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
