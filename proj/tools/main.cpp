#include "textsep/cli.hpp"

int main(int argc, char** argv) { return textsep::cli::run(argc, argv); }
