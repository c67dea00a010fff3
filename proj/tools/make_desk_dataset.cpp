// SPDX-License-Identifier: Apache-2.0
//
// Writes the bundled desk dataset: make_desk_dataset <dir>
#include <iostream>

#include "toolshed/desk_dataset.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_desk_dataset <dir>\n";
    return 2;
  }
  try {
    toolshed::desk::write_standard_dataset(argv[1]);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
