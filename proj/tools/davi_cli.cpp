#include <cstdio>

int main() {
  std::puts("davi cli placeholder");
  return 0;
}
