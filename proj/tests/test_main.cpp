#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "advbyte/error.hpp"

int main(int argc, char** argv) {
  advbyte::set_warnings_enabled(false);
  doctest::Context context(argc, argv);
  return context.run();
}
