#include "dualenc/cli.hpp"

int main(int argc, char** argv) { return dualenc::cli::run(argc, argv); }
