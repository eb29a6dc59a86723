#include "cli.hpp"

int main(int argc, char** argv) { return d3il::cli::run(argc, argv); }
