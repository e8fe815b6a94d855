#include <iostream>

#include "attrobf/cli.hpp"

int main(int argc, char** argv) { return attrobf::cli::run(argc, argv, std::cout, std::cerr); }
