#include <iostream>

#include "trajgen/cli.hpp"

int main(int argc, char** argv) { return trajgen::cli::run(argc, argv, std::cout, std::cerr); }
