#include <string>
#include <vector>

#include "reliocc/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return reliocc::run_cli(std::move(args));
}
