#include <iostream>

#include "simplerob/cli.hpp"

int main(int argc, char** argv) { return simplerob::cli::main(argc, argv, std::cout, std::cerr); }
