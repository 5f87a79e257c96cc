#include "sslseg/cli.hpp"

int main(int argc, char** argv) { return sslseg::run_cli(argc, argv); }
