#include "hamr/evalcli.hpp"

int main(int argc, char** argv) { return hamr::evalcli::run_cli(argc, argv); }
