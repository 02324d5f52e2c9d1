#include "mmrec/cli.hpp"

int main(int argc, char** argv) { return mmrec::cli::run_command(argc, argv); }
