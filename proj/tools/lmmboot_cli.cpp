#include <cstdio>
int main() { std::puts("lmmboot cli placeholder"); return 0; }
