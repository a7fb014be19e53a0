#include "cflow/cli.hpp"

int main(int argc, char** argv) { return cflow::cli::cli_main(argc, argv); }
