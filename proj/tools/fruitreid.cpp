#include "fruitreid/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return fruitreid::run_cli(argc, argv, std::cout, std::cerr); }
