#include "sheafdmfl/cli.hpp"

int main(int argc, char** argv) { return sheafdmfl::main_cli(argc, argv); }
