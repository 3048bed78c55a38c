#include "tscnn/cli.hpp"

int main(int argc, char** argv) { return tscnn::cli_main(argc, argv); }
