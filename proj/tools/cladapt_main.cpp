#include <iostream>

#include "cladapt/cli.hpp"

int main(int argc, char** argv) { return cladapt::cli::run_cli(argc, argv, std::cout, std::cerr); }
