// Double-precision build of the gradient suite: the same reverse-mode code
// paths must agree with central differences to 1e-6 when float rounding is
// out of the picture.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "devid/verify.hpp"

#ifndef DEVID_REAL64
#error "test_grad64 must be compiled against the 64-bit library"
#endif

using namespace devid;

TEST_CASE("all gradient checks hold at 1e-6 in the 64-bit build") {
  const auto results = run_verification();
  int grad_checks = 0;
  for (const CheckResult& r : results) {
    if (r.name.rfind("grad/", 0) != 0) continue;
    ++grad_checks;
    INFO(r.name, " measured ", r.measured);
    CHECK(r.threshold == doctest::Approx(1e-6));
    CHECK(r.measured < 1e-6);
  }
  CHECK(grad_checks >= 10);
}

TEST_CASE("the rest of the verification suite also passes in 64-bit mode") {
  const auto results = run_verification();
  for (const CheckResult& r : results) {
    INFO(r.name, " measured ", r.measured, " threshold ", r.threshold);
    CHECK(r.pass);
  }
}
