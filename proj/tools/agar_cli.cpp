#include "agar/cli.hpp"

int main(int argc, char** argv) { return agar::run_cli(argc, argv); }
