#include <iostream>

#include "krt/cli.hpp"

int main(int argc, char** argv) { return krt::cli::main(argc, argv, std::cout, std::cerr); }
