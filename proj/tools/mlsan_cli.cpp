#include "mlsan/cli.hpp"

int main(int argc, char** argv) { return mlsan::cli::run(argc, argv); }
