#include "synapse/runner.hpp"

int main(int argc, char** argv) { return synapse::cli(argc, argv); }
