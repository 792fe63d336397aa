#include "upcycle/cli.hpp"

int main(int argc, char** argv) { return upcycle::cli::run(argc, argv); }
