#include <iostream>

#include "sharc/cli.hpp"

int main(int argc, char** argv) { return sharc::run_cli(argc, argv, std::cout, std::cerr); }
