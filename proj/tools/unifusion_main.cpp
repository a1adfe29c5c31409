#include "unifusion/cli.hpp"

int main(int argc, char** argv) {
    return unifusion::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
