#include "zerorf/cli.hpp"

int main(int argc, char** argv) { return zerorf::run_cli(argc, argv); }
