#include "neuflow/cli.hpp"

int main(int argc, char** argv) { return neuflow::cli::run(argc, argv); }
