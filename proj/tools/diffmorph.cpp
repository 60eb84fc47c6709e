#include "diffmorph/cli.hpp"

int main(int argc, char** argv) { return diffmorph::cli::run(argc, argv); }
