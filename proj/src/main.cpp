#include "crane/cli.hpp"

int main(int argc, char** argv) { return crane::run_cli(argc, argv); }
