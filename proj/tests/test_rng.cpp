#include <doctest.h>

#include "fmtgp/rng.hpp"

using fmtgp::RandomStream;

TEST_SUITE_BEGIN("rng");

TEST_CASE("streams are reproducible and purpose-separated") {
  RandomStream a(42, "fit", 3);
  RandomStream b(42, "fit", 3);
  RandomStream c(42, "fit", 4);
  RandomStream d(42, "generator", 3);
  bool all_equal = true, index_differs = false, purpose_differs = false;
  for (int i = 0; i < 64; ++i) {
    auto va = a.next_u64();
    all_equal = all_equal && (va == b.next_u64());
    index_differs = index_differs || (va != c.next_u64());
    purpose_differs = purpose_differs || (va != d.next_u64());
  }
  CHECK(all_equal);
  CHECK(index_differs);
  CHECK(purpose_differs);
}

TEST_CASE("uniform stays in [0,1) and looks uniform") {
  RandomStream stream(7, "uniform-check");
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = stream.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("normal has the right first two moments") {
  RandomStream stream(11, "normal-check");
  const int n = 40000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = stream.normal();
    sum += z;
    sum_sq += z * z;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(1.0));
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(sum_sq / n == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("derive gives stable substream seeds") {
  RandomStream a(5, "root");
  RandomStream b(5, "root");
  CHECK(a.derive("child", 2) == b.derive("child", 2));
  CHECK(a.derive("child", 2) != a.derive("child", 3));
}

TEST_SUITE_END();
