#include <unihpe/cli.hpp>

#include <string>
#include <vector>

int main(int argc, char** argv) {
  return unihpe::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
