// Placeholder CLI; subcommands land with the harness.
#include <iostream>

int main() {
    std::cerr << "mmrag: not wired yet\n";
    return 2;
}
