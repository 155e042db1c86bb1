#include <string>
#include <vector>

#include "afan/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return afan::run_cli(args);
}
