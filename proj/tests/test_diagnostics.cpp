#include <cmath>
#include <numbers>

#include "doctest.h"
#include "haloroute/diagnostics.hpp"
#include "haloroute/fields.hpp"
#include "haloroute/rng.hpp"
#include "test_util.hpp"

using namespace haloroute;
using haloroute::testing::random_tensor;

namespace {

Tensor velocity(int n, double (*u)(double, double), double (*v)(double, double)) {
  Tensor f(4, n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double x = grid_coordinate(j, n), y = grid_coordinate(i, n);
      f.at(0, i, j) = u(x, y);
      f.at(1, i, j) = v(x, y);
    }
  }
  return f;
}

}  // namespace

TEST_CASE("divergence") {
  const auto tg = velocity(64, [](double x, double y) { return std::cos(x) * std::sin(y); },
                           [](double x, double y) { return -std::sin(x) * std::cos(y); });
  CHECK(mean_abs_divergence(tg) < 1e-12);
  const auto sep = velocity(32, [](double, double y) { return std::sin(3 * y); },
                            [](double x, double) { return std::cos(2 * x); });
  CHECK(mean_abs_divergence(sep) < 1e-14);

  const int n = 48;
  const auto shear = velocity(n, [](double x, double) { return std::sin(x); }, [](double, double) { return 0.0; });
  const double h = 2.0 * std::numbers::pi / n;
  double m = 0.0;
  for (int j = 0; j < n; ++j) m += std::abs(std::cos(grid_coordinate(j, n)));
  m = m / n * std::sin(h) / h;
  CHECK(mean_abs_divergence(shear) == doctest::Approx(m).epsilon(1e-12));

  // A streamfunction differentiated with the same central stencil is
  // discretely divergence-free.
  Rng rng(1);
  const Tensor psi = random_tensor(rng, 1, n, n);
  Tensor f(4, n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      f.at(0, i, j) = (psi.at(0, (i + 1) % n, j) - psi.at(0, (i + n - 1) % n, j)) / (2 * h);
      f.at(1, i, j) = -(psi.at(0, i, (j + 1) % n) - psi.at(0, i, (j + n - 1) % n)) / (2 * h);
    }
  }
  CHECK(mean_abs_divergence(f) < 1e-10);
}

TEST_CASE("kinetic energy spectrum") {
  const auto mode = velocity(32, [](double x, double y) { return std::cos(3 * x + 4 * y); },
                             [](double, double) { return 0.0; });
  const auto e = ke_spectrum(mode);
  for (std::size_t k = 0; k < e.size(); ++k) {
    if (k == 5) {
      CHECK(e[k] == doctest::Approx(0.25).epsilon(1e-12));
    } else {
      CHECK(std::abs(e[k]) < 1e-20);
    }
  }

  Rng rng(2);
  const Tensor noise = random_tensor(rng, 4, 32, 48);
  const auto en = ke_spectrum(noise);
  double sum = 0.0;
  for (double v : en) sum += v;
  CHECK(std::abs(sum - kinetic_energy(noise)) < 1e-10);

  for (double v : ke_spectrum(Tensor(4, 16, 16))) CHECK(v == 0.0);

  // Translation invariance.
  Tensor shifted(4, 32, 48);
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 32; ++i) {
      for (int j = 0; j < 48; ++j) shifted.at(c, (i + 5) % 32, (j + 11) % 48) = noise.at(c, i, j);
    }
  }
  const auto es = ke_spectrum(shifted);
  for (std::size_t k = 0; k < en.size(); ++k) CHECK(es[k] == doctest::Approx(en[k]).epsilon(1e-10));

  CHECK(high_band_energy(e, 32, 32) < 1e-20);
  const auto hi = velocity(32, [](double x, double) { return std::cos(12 * x); }, [](double, double) { return 0.0; });
  CHECK(high_band_energy(ke_spectrum(hi), 32, 32) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("enstrophy and drift") {
  const auto tg = velocity(32, [](double x, double y) { return std::cos(x) * std::sin(y); },
                           [](double x, double y) { return -std::sin(x) * std::cos(y); });
  // omega = -2 cos x cos y, mean omega^2 / 2 = 0.5
  CHECK(enstrophy(tg) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(kinetic_energy(tg) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(drift(0.7, 0.7) == 0.0);
  CHECK(drift(0.733, 1.037) == doctest::Approx(0.41473).epsilon(1e-4));
  CHECK(drift(2.0, 1.0) == -0.5);
  CHECK_THROWS_AS(drift(0.0, 1.0), NumericError);
  const auto rep = diagnose(tg);
  CHECK(rep.to_json().at("ke_spectrum").size() == rep.spectrum.size());
  CHECK(spectrum_csv(std::vector<double>{1.0, 0.5}) == "shell,energy\n0,1\n1,0.5\n");
}
