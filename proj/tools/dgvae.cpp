#include <iostream>

#include "dgvae/cli.hpp"

int main(int argc, char** argv) { return dgvae::cli::main(argc, argv, std::cout, std::cerr); }
