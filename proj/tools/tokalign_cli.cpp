#include "tokalign/cli.hpp"

int main(int argc, char** argv) { return tokalign::cli(argc, argv); }
