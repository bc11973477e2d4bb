#include <iostream>

#include "depthdiff/commands.hpp"

int main(int argc, char** argv) { return depthdiff::run_cli(argc, argv, std::cout, std::cerr); }
