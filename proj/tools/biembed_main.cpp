#include "biembed/cli.hpp"

int main(int argc, char** argv) { return biembed::cli_main(argc, argv); }
