#include <iostream>

int main() {
  std::cout << "trustdd cli placeholder\n";
  return 0;
}
