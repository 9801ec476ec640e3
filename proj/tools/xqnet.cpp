#include <iostream>

#include "xqnet/cli.hpp"

int main(int argc, char** argv) {
    return xqnet::cli_dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
