#include <iostream>

#include "carn/cli.hpp"

int main(int argc, char** argv) { return carn::cli::run(argc, argv, std::cout, std::cerr); }
