#include "advbyte/cli.hpp"

int main(int argc, char** argv) { return advbyte::cli::dispatch(argc, argv); }
