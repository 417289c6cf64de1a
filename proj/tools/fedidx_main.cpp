#include <iostream>

#include "fedidx/cli.hpp"

int main(int argc, char** argv) { return fedidx::run_cli(argc, argv, std::cout, std::cerr); }
