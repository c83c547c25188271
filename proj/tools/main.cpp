#include <cstdio>

int main() {
    std::puts("hopper: command-line interface not wired up yet");
    return 2;
}
