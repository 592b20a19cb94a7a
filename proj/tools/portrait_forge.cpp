#include "pforge/cli.hpp"

int main(int argc, char** argv) { return pforge::cli_main(argc, argv); }
