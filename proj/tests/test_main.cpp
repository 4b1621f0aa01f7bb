#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "puda/runinfo.hpp"

int main(int argc, char** argv) {
  puda::runinfo::configure_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
