#include <csignal>
#include <string>
#include <vector>

#include "sdc/cli.hpp"

namespace {

void handle_sigint(int) { sdc::cli::interrupt_flag().store(true); }

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, handle_sigint);
  std::vector<std::string> args(argv + 1, argv + argc);
  return sdc::cli::run_cli(args);
}
