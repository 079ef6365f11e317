#include <iostream>

#include "cubevit/cli.hpp"

int main(int argc, char** argv) { return cubevit::cli::run(argc, argv, std::cout, std::cerr); }
