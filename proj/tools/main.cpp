#include "tokopt/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return tokopt::run_cli(argc, argv, std::cout, std::cerr); }
