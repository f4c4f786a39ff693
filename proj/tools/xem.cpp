#include <string>
#include <vector>

#include "xem/cli.hpp"

int main(int argc, char** argv) {
  return xem::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
