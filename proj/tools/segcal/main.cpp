#include <iostream>
#include <string>
#include <vector>

#include "commands.hpp"

int main(int argc, char** argv) {
  if (!segcal::cli::apply_thread_env()) {
    std::cerr << "segcal: SEGCAL_THREADS must be a non-negative integer\n";
    return segcal::cli::kExitUsage;
  }
  std::vector<std::string> args(argv + 1, argv + argc);
  return segcal::cli::run(args, std::cout, std::cerr);
}
