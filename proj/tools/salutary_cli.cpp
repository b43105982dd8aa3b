#include "salutary/cli.hpp"

int main(int argc, char** argv) { return salutary::cli::main(argc, argv); }
