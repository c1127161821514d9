#include "cor/cli.hpp"

int main(int argc, char** argv) { return cor::cli_dispatch(argc, argv); }
