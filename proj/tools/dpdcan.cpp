#include <string>
#include <vector>

#include "dpdcan/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dpdcan::cli::run(std::move(args));
}
