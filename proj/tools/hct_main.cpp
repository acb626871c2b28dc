#include "hct/cli.hpp"

int main(int argc, char** argv) { return hct::cli::run(argc, argv); }
