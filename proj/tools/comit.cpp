#include "comit/cli.hpp"

int main(int argc, char** argv) {
    return comit::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
