// Runs acceptance criteria 1-9 (or the ids given as arguments) and prints one
// PASS/FAIL line per criterion. Exit status 1 when any criterion fails.

#include <iostream>
#include <string>
#include <vector>

#include "adt/acceptance.hpp"

int main(int argc, char** argv) {
  std::vector<int> ids;
  for (int i = 1; i < argc; ++i) ids.push_back(std::stoi(argv[i]));
  if (ids.empty()) ids = adt::acceptance::criteria_for(adt::acceptance::Level::Full);
  const auto results = adt::acceptance::run(ids, std::cout, std::cerr);
  std::size_t passed = 0;
  for (const auto& r : results) passed += r.pass ? 1 : 0;
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
