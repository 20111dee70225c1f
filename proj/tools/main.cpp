#include "firescan_app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return firescan::cli::run(std::move(args));
}
