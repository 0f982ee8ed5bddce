#include <cstdio>

int main() {
    std::puts("viplan cli placeholder");
    return 0;
}
