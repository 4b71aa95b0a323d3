#include <string>
#include <vector>

#include "geofaith/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return geofaith::cli::run(args);
}
