#include "ctdiag/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return ctdiag::run_cli(argc, argv, std::cout, std::cerr); }
