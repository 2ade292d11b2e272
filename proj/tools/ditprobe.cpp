#include "ditprobe/cli.hpp"

int main(int argc, char** argv) { return ditprobe::cli::run(argc, argv); }
