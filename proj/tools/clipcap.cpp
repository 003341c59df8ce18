#include "clipcap/cli.hpp"

int main(int argc, char** argv) {
    return clipcap::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
