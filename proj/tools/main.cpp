#include "flowgate/cli.hpp"

int main(int argc, char** argv) { return flowgate::cli::run_cli(argc, argv); }
