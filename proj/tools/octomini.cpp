#include "octo/cli.hpp"

int main(int argc, char** argv) { return octo::cli::main(argc, argv); }
