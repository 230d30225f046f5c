#include <cmath>

#include "doctest.h"
#include "haloroute/rng.hpp"
#include "haloroute/stats.hpp"
#include "haloroute/tensor.hpp"

using namespace haloroute;

TEST_CASE("audit decomposition") {
  const auto r = audit(1.0, 0.0714, 0.0047);
  CHECK(r.global_share == doctest::Approx(0.9286).epsilon(1e-12));
  CHECK(r.local_gain == doctest::Approx(1.0 - 0.0047 / 0.0714).epsilon(1e-12));
  CHECK(r.local_gain == doctest::Approx(0.9342).epsilon(1e-4));
  CHECK(r.total == doctest::Approx(0.9953).epsilon(1e-12));
  CHECK(r.identity_residual() < 1e-12);

  const auto same = audit(2.0, 0.5, 0.5);
  CHECK(same.local_gain == 0.0);
  CHECK(same.total == same.global_share);
  const auto flat = audit(0.5, 0.5, 0.2);
  CHECK(flat.global_share == 0.0);
  CHECK(flat.total == flat.local_gain);

  CHECK_THROWS_AS(audit(0.0, 1.0, 1.0), NumericError);
  CHECK_THROWS_AS(audit(1.0, -1.0, 1.0), NumericError);

  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double a = std::exp(rng.uniform(-5, 0)), b = std::exp(rng.uniform(-5, 0)),
                 c = std::exp(rng.uniform(-5, 0));
    CHECK(audit(a, b, c).identity_residual() < 1e-12);
  }
}

TEST_CASE("median and paired ratios") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(median({}), NumericError);
  const std::vector<double> raw{1.0, 2.0, 3.0};
  CHECK(median_of_ratios(raw, raw) == 1.0);
  CHECK(median_of_ratios(std::vector<double>{0.1, 0.4, 0.9}, raw) == doctest::Approx(0.2).epsilon(1e-15));
  const std::vector<double> m{1.0, 20.0}, r{2.0, 10.0};
  CHECK(median_of_ratios(m, r) == 1.25);
  CHECK(ratio_of_medians(m, r) == 1.75);
  CHECK_THROWS_AS(median_of_ratios(m, raw), ConfigError);
}

TEST_CASE("nearest-rank percentile") {
  std::vector<double> v;
  for (int i = 1; i <= 10; ++i) v.push_back(0.1 * i);
  CHECK(nearest_rank_percentile(v, 95.0) == v.back());
  CHECK(nearest_rank_percentile(v, 10.0) == v.front());
  CHECK(nearest_rank_percentile(v, 50.0) == v[4]);
  CHECK(nearest_rank_percentile({7.0}, 2.5) == 7.0);
  CHECK_THROWS_AS(nearest_rank_percentile(v, 0.0), ConfigError);
}

TEST_CASE("bootstrap CI") {
  const std::vector<double> c(9, 0.37);
  const auto ci = bootstrap_median_ci(c, 500, 0.05, 1);
  CHECK(ci.lo == 0.37);
  CHECK(ci.hi == 0.37);

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(20));
    std::vector<double> x(static_cast<std::size_t>(n));
    for (double& v : x) v = rng.uniform(0.0, 2.0);
    const auto b = bootstrap_median_ci(x, 2000, 0.05, static_cast<std::uint64_t>(trial));
    const double m = median(x);
    CHECK(b.lo <= m);
    CHECK(m <= b.hi);
  }

  std::vector<double> x(16);
  for (double& v : x) v = rng.uniform();
  const auto a1 = bootstrap_median_ci(x, 10000, 0.05, 99, 1);
  const auto a2 = bootstrap_median_ci(x, 10000, 0.05, 99, 3);
  CHECK(a1.lo == a2.lo);
  CHECK(a1.hi == a2.hi);
}

TEST_CASE("bootstrap CI narrows with more data") {
  auto width = [](int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> x(static_cast<std::size_t>(n));
    for (double& v : x) v = rng.normal();
    const auto ci = bootstrap_median_ci(x, 1000, 0.05, seed);
    return ci.hi - ci.lo;
  };
  std::vector<double> w8, w64;
  for (std::uint64_t s = 0; s < 20; ++s) {
    w8.push_back(width(8, s));
    w64.push_back(width(64, 100 + s));
  }
  CHECK(median(w64) < median(w8));
}

TEST_CASE("sign test") {
  CHECK(sign_test_floor(8) == 0.0078125);
  CHECK(sign_test_floor(1) == 1.0);
  CHECK(sign_test_floor(10) == 2.0 / 1024.0);
  CHECK(sign_test_p(8, 8) == 0.0078125);
  CHECK(sign_test_p(0, 8) == 0.0078125);
  CHECK(sign_test_p(4, 8) == 1.0);
  CHECK(sign_test_p(7, 8) == doctest::Approx(2.0 * 9.0 / 256.0).epsilon(1e-15));
}

TEST_CASE("gini and top-q share") {
  CHECK(gini(std::vector<double>(64, 1.0 / 64)) == 0.0);
  std::vector<double> point(64, 0.0);
  point[17] = 1.0;
  CHECK(gini(point) == doctest::Approx(63.0 / 64.0).epsilon(1e-15));
  CHECK(gini(std::vector<double>(5, 0.0)) == 0.0);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(1 + rng.below(80));
    for (double& v : x) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform(0.0, 3.0);
    CHECK(std::abs(gini(x) - gini_brute_force(x)) < 1e-12);
  }
  CHECK(topq_share(std::vector<double>(64, 1.0), 0.2) == doctest::Approx(13.0 / 64.0).epsilon(1e-15));
  CHECK(topq_share(point, 0.05) == 1.0);
  CHECK(topq_share(std::vector<double>{1, 2, 3}, 1.0) == 1.0);
  const auto rep = concentration(std::vector<double>{1.0, 3.0, 0.0, 4.0});
  double sum = 0.0;
  for (double s : rep.shares) sum += s;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(rep.gini <= 1.0 - 1.0 / 4.0);
}
