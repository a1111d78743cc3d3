#include <vector>

#include "milkit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return milkit::cli::run(args);
}
