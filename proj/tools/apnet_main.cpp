#include <cstdio>

int main() {
  std::puts("apnet cli placeholder");
  return 0;
}
