#include "city2scene/cli.hpp"

int main(int argc, char** argv) { return city2scene::run_cli(argc, argv); }
