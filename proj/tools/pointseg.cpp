#include "pointseg/cli.hpp"

int main(int argc, char** argv) { return pointseg::cli::run(argc, argv); }
