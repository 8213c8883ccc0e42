#include "slode/cli.hpp"

int main(int argc, char** argv) { return slode::cli::run(argc, argv, std::cout, std::cerr); }
