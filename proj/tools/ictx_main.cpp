#include <iostream>

#include "ictx/cli.hpp"

int main(int argc, char** argv) { return ictx::run_cli(argc, argv, std::cout, std::cerr); }
