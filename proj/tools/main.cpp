#include "voxseg/cli.hpp"

int main(int argc, char** argv) { return voxseg::run_cli(argc, argv); }
