#include <string>
#include <vector>

#include "ercmoe/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ercmoe::cli::run(args);
}
