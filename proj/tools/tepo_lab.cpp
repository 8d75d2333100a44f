#include "tepo/commands.hpp"

int main(int argc, char** argv) { return tepo::cli::main_entry(argc, argv); }
