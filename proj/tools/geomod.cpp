#include "geomod/cli.hpp"

int main(int argc, char** argv) { return geomod::run_cli(argc, argv); }
