#include "moralmech/cli.hpp"

int main(int argc, char** argv) { return moralmech::run_cli(argc, argv); }
