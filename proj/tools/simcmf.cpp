#include "simcmf/cli.hpp"

int main(int argc, char** argv) { return simcmf::cli::run(argc, argv); }
