#include <doctest.h>

#include "irnet/gradcheck.hpp"
#include "support/gradcheck_helpers.hpp"

using namespace irnet;

TEST_CASE("dense gradients in 64-bit verification mode are accurate to 1e-6") {
  Rng rng(100);
  for (int i = 0; i < 5; ++i) {
    auto c = gradcase::dense_case<double>(rng);
    GradCheckOptions opts;
    opts.tolerance = 1e-6;
    opts.step = 1e-5;
    opts.seed = static_cast<uint64_t>(i);
    auto report = grad_check(c.fn, c.point, c.analytic, c.names, opts);
    CHECK(report.passed);
    CHECK(report.max_rel_error() < 1e-6);
  }
}

TEST_CASE("relu gradients away from the kink match to machine precision") {
  Rng rng(101);
  auto c = gradcase::relu_case<double>(rng);
  GradCheckOptions opts;
  opts.tolerance = 1e-9;
  auto report = grad_check(c.fn, c.point, c.analytic, c.names, opts);
  CHECK(report.passed);
  CHECK(report.max_rel_error() < 1e-9);
}

TEST_CASE("conv2d float-path gradients pass at 1e-3") {
  Rng rng(102);
  for (int i = 0; i < 3; ++i) {
    auto c = gradcase::conv_case<float>(rng);
    GradCheckOptions opts;
    opts.tolerance = 1e-3;
    opts.seed = static_cast<uint64_t>(i);
    auto report = grad_check(c.fn, c.point, c.analytic, c.names, opts);
    INFO(report.failure_reason);
    CHECK(report.passed);
  }
}

TEST_CASE("batchnorm float-path gradients pass at 1e-3") {
  Rng rng(103);
  auto c = gradcase::batchnorm_case<float>(rng);
  GradCheckOptions opts;
  opts.tolerance = 1e-3;
  auto report = grad_check(c.fn, c.point, c.analytic, c.names, opts);
  INFO(report.failure_reason);
  CHECK(report.passed);
}

TEST_CASE("softmax cross entropy 64-bit gradients pass at 1e-6") {
  Rng rng(104);
  auto c = gradcase::softmax_xent_case<double>(rng);
  GradCheckOptions opts;
  opts.tolerance = 1e-6;
  auto report = grad_check(c.fn, c.point, c.analytic, c.names, opts);
  CHECK(report.passed);
}

TEST_CASE("non-finite analytic gradients yield a failure report, not a crash") {
  Tensor64 x({2}, {1.0, 2.0});
  Tensor64 bad({2}, {std::numeric_limits<double>::quiet_NaN(), 0.0});
  auto fn = [](const std::vector<Tensor64>& p) { return p[0][0] + p[0][1]; };
  auto report = grad_check(fn, {x}, {bad}, {"x"});
  CHECK_FALSE(report.passed);
  CHECK(report.failure_reason.find("non-finite") != std::string::npos);
}

TEST_CASE("a wrong analytic gradient is caught") {
  Tensor64 x({1}, {0.5});
  Tensor64 wrong({1}, {3.0});  // true gradient of x^2 at 0.5 is 1.0
  auto fn = [](const std::vector<Tensor64>& p) { return p[0][0] * p[0][0]; };
  auto report = grad_check(fn, {x}, {wrong}, {"x"});
  CHECK_FALSE(report.passed);
}
