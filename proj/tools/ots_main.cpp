#include <cstdio>

int main() {
    std::puts("ots: not wired up yet");
    return 0;
}
