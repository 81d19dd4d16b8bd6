#include "dbpot/cli.hpp"

int main(int argc, char** argv) { return dbpot::cli::main(argc, argv); }
