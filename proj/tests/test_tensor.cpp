#include <doctest.h>

#include "irnet/tensor.hpp"

using namespace irnet;

TEST_CASE("tensor shape and data length must agree") {
  CHECK_NOTHROW(Tensor({2, 3}, std::vector<float>(6, 0.f)));
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5, 0.f)), Error);
}

TEST_CASE("tensor extents must be positive") {
  CHECK_THROWS_AS(Tensor({2, 0}), Error);
  CHECK_THROWS_AS(Tensor(Shape{}), Error);
}

TEST_CASE("row-major indexing") {
  Tensor t({1, 2, 2, 3});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  CHECK(t.at4(0, 0, 0, 0) == 0.f);
  CHECK(t.at4(0, 0, 0, 2) == 2.f);
  CHECK(t.at4(0, 0, 1, 0) == 3.f);
  CHECK(t.at4(0, 1, 0, 0) == 6.f);
  CHECK(t.at4(0, 1, 1, 2) == 11.f);
}

TEST_CASE("cast widens exactly") {
  Tensor t({3}, {0.1f, -2.5f, 7.f});
  Tensor64 d = t.cast<double>();
  for (int64_t i = 0; i < t.size(); ++i) CHECK(d[i] == static_cast<double>(t[i]));
}

TEST_CASE("finiteness probe") {
  Tensor t({2}, {1.f, 2.f});
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
}
