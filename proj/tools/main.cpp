#include <string>
#include <vector>

#include "attnlink/cli.hpp"

int main(int argc, char** argv) {
  return attnlink::dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
